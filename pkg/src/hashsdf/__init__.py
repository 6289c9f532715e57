"""Neural surface reconstruction with multi-resolution hash grids,
numerical-gradient normals and coarse-to-fine level activation."""
from .config import RunConfig
from .encoding import EncodingConfig, HashGrid
from .field import FieldConfig, NeuralField
from .geometry import Camera, InvalidInput
from .mesh import TriangleMesh, marching_cubes
from .renderer import RenderConfig, render_rays
from .training import ScheduleConfig, Trainer, schedule_at, schedule_step

__version__ = "0.1.0"
