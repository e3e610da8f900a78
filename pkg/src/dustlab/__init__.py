"""Desk-scale laboratory for dropout-based uncertainty-driven self-training
(DUST) of a CTC character recognizer on synthetic multi-domain data.
"""

__version__ = "0.1.0"
