"""ncprobe: a desk-scale laboratory for control-oriented neural collapse.

Expert demonstration generation (analytic double-integrator expert, scripted
planar-pushing expert), behavior cloning with a small MLP trained by built-in
reverse-mode differentiation, relative-pose-orthant classification, neural
collapse measurement, and NC-based encoder pretraining with closed-loop
evaluation.
"""

__version__ = "0.1.0"
