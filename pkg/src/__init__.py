"""
Lung EIT manifold reconstruction
Shunt-model forward solver, regularized baselines and a VAE-constrained reconstruction map
"""

__version__ = "0.1.0"
