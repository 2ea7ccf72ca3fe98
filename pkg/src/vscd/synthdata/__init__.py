from .dataset import DatasetPair, VideoClip, load_manifest, load_pair, manifest_hash, pair_dirs
from .generate import GenConfig, generate_dataset, rebuild_masks
from .render import Pose, Trajectory, render, render_change_masks, render_frame, sample_trajectory
from .world import ChangeSet, Illumination, Layout, ObjectInstance, Scene, make_pairs, symmetric_difference

__all__ = [
    "ChangeSet", "DatasetPair", "GenConfig", "Illumination", "Layout", "ObjectInstance", "Pose", "Scene",
    "Trajectory", "VideoClip", "generate_dataset", "load_manifest", "load_pair", "make_pairs", "manifest_hash",
    "pair_dirs", "rebuild_masks", "render", "render_change_masks", "render_frame", "sample_trajectory",
    "symmetric_difference",
]
