"""Post-network pipeline for top-down pose estimation in video."""

from .boxes import emd_set_distance, iou, nms, set_nms, weighted_box_fusion
from .errors import HieposeError, InvalidInputError, MissingInputError, UnsupportedSizeError
from .flow import (FlowVector, PyramidParams, gaussian_pyramid, lucas_kanade_at_points,
                   propagate_pose)
from .heatmap import (AffineTransform, Heatmap, box_to_crop_transform, decode_keypoints,
                      flip_back, flip_heatmap, fuse_heatmaps, resample_heatmap)
from .metrics import (average_precision, keypoint_ap, log_average_miss_rate, match_greedy,
                      miss_rate_curve, weighted_ap)
from .posenms import OksParams, oks, pose_nms
from .structures import DetectionBox, Keypoint, Pose
from .tracking import (SmoothingParams, Track, appearance_similarity, associate_frames,
                       build_tracks, smooth_video, temporal_smooth)

__version__ = "0.1.0"
