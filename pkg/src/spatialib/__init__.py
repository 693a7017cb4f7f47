from spatialib.autodiff import DiffValue, Graph, backward, tensor, vjp
from spatialib.models import (
    ConfigError,
    ContractError,
    DatasetFormatError,
    DomainError,
    FaithfulnessError,
    NonFiniteLossError,
    ParseError,
    RunConfig,
    SaliencyMap,
    ShapeError,
    SibSettings,
    SpatialIBError,
)
from spatialib.network import Classifier, build_linear, build_small_cnn
from spatialib.sib import compute_vjp_decoding, generate_mask, sib_loss, train
from spatialib.explain import explain
from spatialib.data import generate_synthetic, load_folder
