import numpy as np
import pytest

from boostdream.cameras import CameraPose

UNIT_CUBE_OBJ = """\
v -1 -1 -1
v 1 -1 -1
v 1 1 -1
v -1 1 -1
v -1 -1 1
v 1 -1 1
v 1 1 1
v -1 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""

FACE_COLORS = np.array(
    [
        [0.9, 0.1, 0.1],
        [0.1, 0.9, 0.1],
        [0.1, 0.1, 0.9],
        [0.9, 0.9, 0.1],
        [0.1, 0.9, 0.9],
        [0.9, 0.1, 0.9],
    ]
)


@pytest.fixture
def cube_obj(tmp_path):
    path = tmp_path / "cube.obj"
    path.write_text(UNIT_CUBE_OBJ)
    return path


@pytest.fixture
def colored_cube():
    from boostdream.mesh import make_cube

    return make_cube(FACE_COLORS)


def axis_pose(distance=3.0, image_size=32, fov=50.0, axis=0, sign=1):
    position = np.zeros(3)
    position[axis] = sign * distance
    up = np.array([0.0, 0.0, 1.0]) if axis != 2 else np.array([1.0, 0.0, 0.0])
    return CameraPose(
        position=position, target=np.zeros(3), up=up, fov_deg=fov, image_size=image_size
    )
