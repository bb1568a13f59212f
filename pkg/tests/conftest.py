import numpy as np
import pytest

from mvdet.camgeo import CameraExtrinsics, CameraIntrinsics, CameraModel, CameraRig
from mvdet.synth import gen_rig


@pytest.fixture(scope="session")
def ident_cam():
    """Camera whose frame coincides with the ego frame (R=I, t=0)."""
    return CameraModel(
        intrinsics=CameraIntrinsics(fx=1000.0, fy=1000.0, cx=800.0, cy=450.0, width=1600, height=900),
        extrinsics=CameraExtrinsics(rotation=np.eye(3), translation=np.zeros(3)),
        id="ident",
    )


@pytest.fixture(scope="session")
def rig6():
    return gen_rig("nuscenes-like")


@pytest.fixture(scope="session")
def rig1():
    return gen_rig("single")


@pytest.fixture()
def ident_rig(ident_cam):
    return CameraRig(cameras=(ident_cam,))
