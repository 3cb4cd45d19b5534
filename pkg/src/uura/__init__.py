"""Link-level simulator and Bayesian joint decoder for massive uncoupled
unsourced random access over MIMO Rayleigh fading channels."""

from .channel import (LinkBudget, Topology, calibrate_power, draw_channels,
                      draw_topology, path_loss_db, state_matrix, transmit_slot)
from .codebook import (Codebook, CodebookError, build_codebook,
                       collision_probability, demap_index, encode_message)
from .decision import (ActiveCodewordList, DetectionTheory,
                       chi_square_abscissas, compute_threshold, decide_active,
                       theoretical_detection_errors)
from .em import PriorEstimates, em_update, init_priors, initial_activity_fraction
from .harness import (ExperimentConfig, TrialMetrics, aggregate, load_scenario,
                      reproduce_figure, run_many, run_sweep, run_trial,
                      save_scenario, theoretical_cer)
from .oamp import (DetectorDivergence, DetectorOptions, DetectorResult,
                   detect_slot, linear_estimate, nonlinear_estimate)
from .stitcher import (ClassAssignment, RecoveredMessages, StitchOptions,
                       cer_min, classify_slot, init_classes, kmeans_baseline,
                       stitch_all)
from .theory import (SETrajectory, TheoryError, asymptotic_pmd_pfa,
                     fixed_point_u, state_evolution, theoretical_p2,
                     tradeoff_tau)

__version__ = "0.1.0"
