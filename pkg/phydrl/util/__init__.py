from .errors import PhyDrlError
from .files import load_matrix, save_matrix, write_csv, write_manifest
from .validators import Matrix, Vector, array_validator, as_state
