"""Desk-scale visual-geometric height map refinement and navigation."""

__version__ = "0.1.0"

from .grid import (HeightMap, Heading, MapWindow, DisturbanceSpec,
                   apply_disturbance, directional_distances, extract_window,
                   merge_window, load_map, save_map)
from .keypoints import (Keypoint3D, SimilarityTransform, project_keypoint,
                        simulate_slam_keypoints)
from .network import MODES, FusionNet, MomentState, NetworkConfig, SequenceSample
from .planner import OccupancyGrid, PlanResult, occupancy, plan, update_and_replan
from .sim import (DatasetParams, Scene, SceneParams, build_dataset,
                  disturb_to_fraction, evaluate_mapping, evaluate_navigation,
                  generate_scene, load_episode, render_observation,
                  replay_episode, run_episode)
from .training import TrainConfig, train_network

__all__ = [
    "HeightMap", "Heading", "MapWindow", "DisturbanceSpec",
    "apply_disturbance", "directional_distances", "extract_window",
    "merge_window", "load_map", "save_map",
    "Keypoint3D", "SimilarityTransform", "project_keypoint",
    "simulate_slam_keypoints",
    "MODES", "FusionNet", "MomentState", "NetworkConfig", "SequenceSample",
    "OccupancyGrid", "PlanResult", "occupancy", "plan", "update_and_replan",
    "DatasetParams", "Scene", "SceneParams", "build_dataset",
    "disturb_to_fraction", "evaluate_mapping", "evaluate_navigation",
    "generate_scene", "load_episode", "render_observation", "replay_episode",
    "run_episode",
    "TrainConfig", "train_network",
]
