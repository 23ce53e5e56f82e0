import numba
import numpy as np
import pytest

numba.config.THREADING_LAYER = "workqueue"

from cbct.geometry import ConeBeamGeometry, ScanKind, fan_angle, make_angles


def build_geom(n_views=8, kind=ScanKind.FULL, det_rows=24, det_cols=24,
               pitch=1.2, vol=(32, 32, 32), voxel=0.25, sod=50.0, sdd=100.0):
    probe = ConeBeamGeometry(sod, sdd, det_rows, det_cols, pitch, vol, voxel,
                             np.array([0.0]), ScanKind.FULL)
    angles = make_angles(kind, fan_angle(probe), n_views)
    return ConeBeamGeometry(sod, sdd, det_rows, det_cols, pitch, vol, voxel,
                            angles, kind)


def desk_geom(n_views, kind):
    """Default desk-scale acquisition: 64^3 volume, 64x64 detector."""
    return build_geom(n_views, kind, det_rows=64, det_cols=64, pitch=0.75,
                      vol=(64, 64, 64), voxel=0.2)


@pytest.fixture
def small_geom():
    return build_geom()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
