"""Few-shot detection heads with fast second-order training and
hierarchy-preserving two-stage inference."""

__version__ = "0.1.0"

from .detect import Detection, PostProcessConfig, decode_deltas, encode_deltas, iou, nms
from .errors import ConfigError, FormatError, NumericalError, ValidationError
from .heads import LossConfig, PredictorHead, WarmStart, augment, forward, init_head
from .hierarchy import (BehaviourTable, ClassHierarchy, RoutedProposals,
                        analyze_base_behaviour, auto_assign, base_only_inference,
                        hierarchical_inference, route_proposals)
from .linalg import CgResult, LinearOperator, cg_solve, dense_spd_solve, matrix_operator
from .dataio import (FeatureDataset, PlantedTruth, SyntheticConfig, acceptance_config,
                     generate_synthetic, read_dataset, read_detections, read_hierarchy,
                     write_dataset, write_detections, write_hierarchy)
from .optim import (AugmentConfig, NewtonConfig, SgdConfig, TrainingCurve, newton_step,
                    train_full_batch, train_minibatch, train_sgd)
from .evaluation import (EvalResult, average_precision, convergence_report, evaluate,
                         match_detections)
