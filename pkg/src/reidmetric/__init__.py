"""Metric-learning toolkit for person re-identification: AM-Softmax with an
entropy-relaxed identity loss, numpy layers with hand-written backward
passes, AMSGrad, identity-balanced sampling, synthetic domain shift and a
re-ID evaluation kit.
"""

__version__ = "0.1.0"
