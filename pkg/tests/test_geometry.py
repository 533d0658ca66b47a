import pytest
from hypothesis import given, strategies as st

from kpbank.errors import DomainError
from kpbank.geometry import GridSpec, grid_to_image, image_to_grid


@pytest.mark.parametrize("xy, stride, size, cell", [
    ((0, 0), 4, 64, (0, 0)),
    ((7.9, 4.0), 4, 64, (1, 1)),
    ((63, 31), 8, 64, (7, 3)),
])
def test_image_to_grid_fixtures(xy, stride, size, cell):
    assert image_to_grid(*xy, GridSpec(size, size, stride)) == cell


@pytest.mark.parametrize("cell, stride, xy", [((0, 0), 4, (2, 2)), ((7, 3), 8, (60, 28))])
def test_grid_to_image_fixtures(cell, stride, xy):
    assert grid_to_image(cell, GridSpec(64, 64, stride)) == xy


def test_grid_dims_round_up():
    spec = GridSpec(63, 65, 4)
    assert spec.shape == (16, 17)


@pytest.mark.parametrize("xy", [(-0.1, 0), (64, 0), (0, 64), (3, -1)])
def test_out_of_bounds_pixel(xy):
    with pytest.raises(DomainError):
        image_to_grid(*xy, GridSpec(64, 64, 4))


@pytest.mark.parametrize("cell", [(-1, 0), (16, 0), (0, 16)])
def test_out_of_bounds_cell(cell):
    with pytest.raises(DomainError):
        grid_to_image(cell, GridSpec(64, 64, 4))


specs = st.builds(GridSpec, st.integers(1, 80), st.integers(1, 80), st.integers(1, 9))


@given(specs, st.data())
def test_round_trip(spec, data):
    col = data.draw(st.integers(0, spec.grid_width - 1))
    row = data.draw(st.integers(0, spec.grid_height - 1))
    assert image_to_grid(*grid_to_image((col, row), spec), spec) == (col, row)


@given(specs, st.data())
def test_localization_bound(spec, data):
    x = data.draw(st.floats(0, spec.image_width, exclude_max=True))
    y = data.draw(st.floats(0, spec.image_height, exclude_max=True))
    bx, by = grid_to_image(image_to_grid(x, y, spec), spec)
    # the clamped center of a partial cell is its midpoint, so the bound still holds
    assert max(abs(bx - x), abs(by - y)) <= spec.stride / 2 + 1e-9
    # back-projection never leaves the image
    assert 0 <= bx <= spec.image_width and 0 <= by <= spec.image_height
    # and never leaves the source cell
    assert image_to_grid(bx, by, spec) == image_to_grid(x, y, spec)
