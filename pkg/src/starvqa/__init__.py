"""No-reference video quality assessment with a divided space-time transformer."""
from .anchors import AnchorCodec, SvrDecoder, encode_mos, expectation_decode, make_anchors, vr_loss
from .config import ModelConfig, TrainConfig
from .errors import (ConfigError, ContractError, DegenerateInputError, DimensionError, FormatError,
                     InputError, StarVQAError, StateError)
from .io import load_checkpoint, load_manifest, read_container, save_checkpoint, write_container
from .metrics import plcc, srocc
from .model import StarVQA
from .tokenizer import RawVideo, tokenize
from .training import (estimate_flops, infer_video, lr_schedule, split_dataset, train_stage_image,
                       train_stage_video, transfer_weights)

__version__ = "0.1.0"
