"""Point-cloud feature learning with multi-scale local regions, variable-size
convolution across scales and similarity-weighted region mixing."""
from .config import ModelConfig, RunConfig, TrainConfig, desk_config, tiny_config
from .dataio import PointCloud, gen_synthetic, load_xyz, normalize_cloud, sample_mesh
from .model import (Checkpoint, forward_classify, forward_segment, init_params,
                    load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
