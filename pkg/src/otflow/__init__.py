"""OT-regularized continuous normalizing flows."""
