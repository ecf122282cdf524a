import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import synthetic_scene
from meshrefine import DepthRefiner, GlobalDepthAligner
from meshrefine.losses import project_cloud
from meshrefine.pipeline import align_statistics


@pytest.fixture(scope="module")
def room():
    return synthetic_scene(width=48, height=36, views=3, n_points=800)


def test_params_roundtrip_and_clone():
    est = DepthRefiner(d=8, r=0.3, field="affine", seed=4)
    params = est.get_params()
    assert params["d"] == 8 and params["field"] == "affine" and params["weights"] is None
    c = clone(est)
    assert c.get_params() == params and c is not est
    c.set_params(local_iters=3)
    assert c.local_iters == 3 and est.local_iters == 700


def test_invalid_params_raise_at_fit(room):
    with pytest.raises(ValueError):
        DepthRefiner(r=0.0).fit(room)
    with pytest.raises(TypeError):
        DepthRefiner().fit(np.zeros((4, 4)))


def test_fit_predict(room):
    est = DepthRefiner(coarse_iters=2, local_iters=2, batch=2)
    with pytest.raises(NotFittedError):
        est.predict()
    est.fit(room)
    assert est.depth_.shape == room.mono.shape
    assert len(est.history_) == 4 and est.metrics_ is not None
    assert est.config_.describe() == est.config().describe()
    assert est.predict() is est.depth_
    again = est.predict(room)
    assert again.tobytes() == est.depth_.tobytes()


def test_initial_depth_override(room):
    est = DepthRefiner(coarse_iters=0, local_iters=0).fit(room, initial_depth=room.gt)
    assert np.array_equal(est.initial_depth_, np.clip(room.gt, room.near, room.far))
    with pytest.raises(ValueError):
        DepthRefiner(coarse_iters=0, local_iters=0).fit(room, initial_depth=room.gt[:-1])
    with pytest.raises(ValueError):
        DepthRefiner(coarse_iters=0, local_iters=0).fit(room, initial_depth=np.full_like(room.gt, np.inf))


def test_aligner_matches_statistics(room):
    pts = project_cloud(room.points, room.ref)
    al = GlobalDepthAligner().fit(room.mono, room.points, view=room.ref)
    a, b, fb = align_statistics(room.mono.ravel(), pts.z)
    assert (al.scale_, al.offset_, al.fallback_) == (a, b, fb) and al.n_points_ == len(pts)
    out = al.transform(room.mono)
    assert np.allclose(out, a * room.mono + b)
    assert np.array_equal(GlobalDepthAligner().fit_transform(room.mono, pts.z), out)


def test_aligner_validation():
    with pytest.raises(NotFittedError):
        GlobalDepthAligner().transform(np.ones((3, 3)))
    with pytest.raises(ValueError):
        GlobalDepthAligner().fit(np.ones(5), np.ones(5))
    with pytest.raises(ValueError):
        GlobalDepthAligner().fit(np.full((3, 3), 0.4), np.arange(1.0, 6.0))
