"""Window-based two-pass motion correction for 4D contrast-enhanced ultrasound."""
from .affine import AffineRegConfig, RegistrationError, affine_register
from .bspline import BSplineGrid, bending_energy, evaluate_field, log_jacobian_penalty
from .evaluation import extract_tic, fit_lognormal, pairwise_ncc, pairwise_overlap
from .ffd import FfdConfig, ffd_register
from .phantom import PhantomSpec, generate_phantom_cine
from .pipeline import PipelineConfig, detect_start_frame, motion_correct, plan_windows
from .similarity import joint_histogram, nmi
from .transforms import AffineTransform, DenseDisplacementField
from .volume import Cine4, Mask3, SpatialMapping, Volume3, average_frames, resample

__version__ = "0.1.0"
