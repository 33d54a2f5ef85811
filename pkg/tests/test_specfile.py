import numpy as np
import pytest

from cn2lab.errors import SpecFileError
from cn2lab.metric import MetricField, TorusAtlas, metric_at
from cn2lab.specfile import load, loads

SINGLE = """
# a conformally flat bump
[chart]
dimension = 3
coords = x, y, z
box = -1 1, -1 1, -1 1
periodic = no, yes, yes

[metric]
g 1 1 = exp(0.2*bump(2*x)*bump(2*y))
g 2 2 = exp(0.2*bump(2*x)*bump(2*y))
"""

ATLAS = """
[chart]
dimension = 3
coords = x, y, z
box = -1 1, -1 1, -1 1

[metric A]
[metric B]

[blocks]
A offset=0,0,0
B offset=2,0,0

[glue]
A:1:+ B:1:- shift=-2,0,0
B:1:+ A:1:- shift=-2,0,0
A:2:+ A:2:- shift=0,-2,0
A:3:+ A:3:- shift=0,0,-2
B:2:+ B:2:- shift=0,-2,0
B:3:+ B:3:- shift=0,0,-2
"""


def test_single_chart():
    f = loads(SINGLE)
    assert isinstance(f, MetricField)
    assert f.chart.periodic == (False, True, True)
    g = metric_at(f, [0.0, 0.0, 0.0])
    assert g[0, 0] == pytest.approx(np.exp(0.2))
    assert g[2, 2] == 1.0


def test_atlas_round_trip(tmp_path):
    path = tmp_path / "two.cn2"
    path.write_text(ATLAS)
    atlas = load(path)
    assert isinstance(atlas, TorusAtlas)
    assert len(atlas.blocks) == 2
    atlas.validate()
    b, x, _, _ = atlas.canonicalize(0, [1.25, 0.0, 0.0])
    assert b == 1
    np.testing.assert_allclose(x, [-0.75, 0.0, 0.0])


@pytest.mark.parametrize("text,line", [
    ("[chart]\ndimension = 2\ncoords = u, v\nbox = -1 1, -1 1\n[metric]\ng 1 1 = 1 +\n", 6),
    ("[chart]\ndimension = 2\ncoords = u, v\nbox = -1 1, -1 1\n[metric]\ng 1 1 = q\n", 6),
    ("[chart]\ndimension = 2\ncoords = u, v\nbox = -1 1\n", 4),
    ("x = 1\n", 1),
    ("[chart]\ndimension = 2\ncoords = u, v\nbox = -1 1, -1 1\n[wibble]\n", 5),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(SpecFileError) as info:
        loads(text)
    assert info.value.line == line


def test_missing_metric():
    with pytest.raises(SpecFileError):
        loads("[chart]\ndimension = 2\ncoords = u, v\nbox = -1 1, -1 1\n")


def test_glue_to_unknown_block():
    bad = ATLAS.replace("A:1:+ B:1:-", "A:1:+ C:1:-")
    with pytest.raises(SpecFileError) as info:
        loads(bad)
    assert info.value.line == 15
