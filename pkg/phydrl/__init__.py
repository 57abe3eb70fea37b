from .core import EnvelopeGain, RewardConfig, RewardVariant
from .experiment.config import ExperimentConfig, load_config
from .safety import Envelope, NormalizedSafety, SafetySpec
from .synthesis import SynthesisProblem, SynthesisSolution, solve, verify
from .util.errors import PhyDrlError
