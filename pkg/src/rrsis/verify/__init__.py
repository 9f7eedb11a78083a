"""Independent oracles and the finite-difference gradient harness."""

from .gradcheck import GradCheckReport, finite_difference_check, relative_error
from .oracles import oracle_attention, oracle_iou

__all__ = ["GradCheckReport", "finite_difference_check", "relative_error", "oracle_attention", "oracle_iou"]
