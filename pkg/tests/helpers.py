"""Small constructors shared by the tests."""
import numpy as np

from hiepose.structures import DetectionBox, Pose


def make_pose(xy, score=1.0, joint_score=1.0, **kw):
    xy = np.asarray(xy, dtype=np.float64)
    if np.isscalar(joint_score):
        s = np.full((len(xy), 1), float(joint_score))
    else:
        s = np.asarray(joint_score, dtype=np.float64)[:, None]
    return Pose(np.hstack([xy, s]), score=score, **kw)


def random_box(rng, extent=100.0, min_size=5.0, max_size=40.0, **kw):
    x0, y0 = rng.uniform(0, extent, 2)
    w, h = rng.uniform(min_size, max_size, 2)
    return DetectionBox(float(x0), float(y0), float(x0 + w), float(y0 + h), **kw)
