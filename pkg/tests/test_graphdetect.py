import dataclasses

import numpy as np
import pytest

from cn2lab import builtins as bi
from cn2lab.errors import BadParams, ResolutionTooCoarse
from cn2lab.graphdetect import (BOUNDARY, EXTENDED, boundary_profile, components, cylinder_check,
                                detect, extend, sample, volume)


@pytest.fixture(scope="module")
def ex1_runs():
    return {h: detect(bi.ex1(), h) for h in (1 / 8, 1 / 16)}


def _thickness(report, sheet):
    """Cells across the sheet: cell count over its footprint, minimised over axes and blocks."""
    smp = report.extension.sample
    best = np.inf
    for b in np.unique(smp.block[sheet.cells]):
        ctr = smp.center[sheet.cells][smp.block[sheet.cells] == b]
        for ax in range(ctr.shape[1]):
            foot = np.unique(np.round(np.delete(ctr, ax, axis=1) / smp.h, 3), axis=0)
            best = min(best, len(ctr) / len(foot))
    return best


def test_flat_torus_has_no_components():
    smp = sample(bi.flat(3), 0.25)
    assert not smp.nonflat.any()
    _, count = components(smp)
    assert count == 0
    assert detect(bi.flat(3), 0.25).verdict == "FlatEverywhere"


def test_adjacency_is_symmetric():
    smp = sample(bi.ex1(), 1 / 4)
    pairs = set(zip(smp.eu.tolist(), smp.ev.tolist()))
    assert all(u < v for u, v in pairs)
    # every cell has two neighbours per axis on a closed atlas
    deg = np.bincount(np.concatenate([smp.eu, smp.ev]), minlength=smp.n_cells)
    assert np.all(deg == 2 * smp.dimension)


def test_ex1_sample_and_components():
    smp = sample(bi.ex1(), 1 / 8)
    assert np.all(smp.mu[smp.nonflat] == 1)
    _, count = components(smp)
    assert count == 2


def test_ex2_has_three_nonflat_clusters():
    _, count = components(sample(bi.ex2(), 1 / 8))
    assert count == 3


def test_cylinder_residual_on_product():
    smp = sample(bi.sphere_product(theta_margin=0.3), 0.125, adapt=True)
    labels, count = components(smp)
    assert count == 1
    assert cylinder_check(smp, labels, 0) <= 1e-6


def test_ex1_verdict(ex1_runs):
    rep = ex1_runs[1 / 16]
    assert rep.verdict == "GeometricGraphManifold"
    assert len(rep.nodes) == 2 and len(rep.edges) == 2
    assert all(e.accepted and len(e.sides) == 2 for e in rep.edges)


def test_monotone_refinement(ex1_runs):
    coarse, fine = ex1_runs[1 / 8], ex1_runs[1 / 16]
    assert max(n["cylinder_residual"] for n in fine.nodes) <= \
        max(n["cylinder_residual"] for n in coarse.nodes) + 1e-12
    assert max(_thickness(fine, s) for s in fine.edges) <= \
        max(_thickness(coarse, s) for s in coarse.edges)


def test_nonflat_cells_never_boundary(ex1_runs):
    ext = ex1_runs[1 / 8].extension
    assert not np.any(ext.sample.nonflat & (ext.label >= BOUNDARY))


def test_one_sided_slab_fails_profile_law(ex1_runs):
    ext = ex1_runs[1 / 8].extension
    smp = ext.sample
    # an Extended cell with every ball neighbour in one component
    cell = next(c for c in np.flatnonzero(ext.label == EXTENDED)
                if boundary_profile(ext, int(c)).m == 1)
    label = ext.label.copy()
    label[cell] = BOUNDARY
    fake = dataclasses.replace(ext, label=label)
    prof = boundary_profile(fake, int(cell))
    assert prof.n_clusters == 1
    assert not prof.law_ok


def test_report_is_deterministic():
    a = detect(bi.ex1(), 1 / 8).to_json()
    b = detect(bi.ex1(), 1 / 8).to_json()
    assert a == b


def test_resolution_too_coarse():
    with pytest.raises(ResolutionTooCoarse):
        sample(bi.ex1(), 2.0)


def test_h_must_divide_block():
    with pytest.raises(BadParams):
        sample(bi.ex1(), 0.3)


def test_flat_box_volume():
    v, err = volume(bi.flat(3, box=([0, 0, 0], [2, 2, 2])), 0.25)
    assert v == pytest.approx(8.0)
    assert err < 1e-12
