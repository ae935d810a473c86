"""Flat key-value config files with typed sections.

Grammar (a small TOML subset, enough for experiment configs):

    # comment
    key = value
    [section]
    key = value

Values: int, float, bool (true/false), quoted strings, and [v1, v2, ...]
lists of those. parse -> emit -> parse is the identity on the parsed dict.
"""

from __future__ import annotations

from .errors import FormatError


def _parse_scalar(tok: str):
    tok = tok.strip()
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        return tok[1:-1]
    if tok == "true":
        return True
    if tok == "false":
        return False
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"cannot parse value {tok!r}")


def _split_list(body: str):
    parts, depth, cur, in_str = [], 0, "", False
    for ch in body:
        if ch == '"':
            in_str = not in_str
        if ch == "," and depth == 0 and not in_str:
            parts.append(cur)
            cur = ""
            continue
        cur += ch
    if cur.strip():
        parts.append(cur)
    return parts


def _parse_value(tok: str):
    tok = tok.strip()
    if tok.startswith("[") and tok.endswith("]"):
        body = tok[1:-1].strip()
        if not body:
            return []
        return [_parse_scalar(p) for p in _split_list(body)]
    return _parse_scalar(tok)


def parse_config(text: str) -> dict:
    """Nested dict: top-level keys plus one dict per [section]."""
    out: dict = {}
    target = out
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise FormatError(f"line {lineno}: empty section name")
            target = out.setdefault(name, {})
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        target[key.strip()] = _parse_value(val)
    return out


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_emit_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_config(cfg: dict) -> str:
    lines = []
    sections = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            sections.append((k, v))
        else:
            lines.append(f"{k} = {_emit_value(v)}")
    for name, body in sections:
        lines.append("")
        lines.append(f"[{name}]")
        for k, v in body.items():
            lines.append(f"{k} = {_emit_value(v)}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> dict:
    with open(path) as f:
        return parse_config(f.read())
