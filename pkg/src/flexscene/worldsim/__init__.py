"""Synthetic multi-camera driving clips with engineered cross-view and cross-time redundancy."""

from .clip import Clip, ConfigError, WorldConfig, clip_seed, generate_clip, world_at
from .dataset import ClipDataset, DatasetError, is_test_clip, read_dataset, split_ids, write_dataset
from .render import RIG, TELE, WIDE, CameraSpec, WorldState, background_texture, render_camera, rig
from .scenario import SCENARIOS, Scenario, sample_scenario
