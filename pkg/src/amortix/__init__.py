"""amortix: amortized feature-selection explainers, audited properly.

Train selector/predictor pairs (REAL-X-style disjoint training, joint
baselines, relaxed top-k selection), audit their selections with an
evaluator trained on random masks or a per-subset model collection, and
reproduce the prediction-encoding and control-flow-omission failure modes
constructively.
"""

__version__ = "0.1.0"
