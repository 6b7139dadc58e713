"""Multimodal quantum federated learning simulator."""

from .circuits import NoiseSpec, ParamCircuit, build_fusion_circuit, build_modality_pqc
from .data import MissingSpec, MultimodalDataset, gen_synthetic, inject_missing, load_features, save_features
from .errors import ConfigError, FormatError, NumericError, StructuralError
from .federation import FederationSettings, aggregate, partition, run_federation
from .model import ModalitySpec, MultimodalModel, forward, forward_batch, local_train, predict
from .qstate import GateKind, GateOp, StateVector

__version__ = "0.1.0"
