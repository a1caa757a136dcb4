import json

import numpy as np
import pytest

from atlasfuse.metrics import dice
from atlasfuse.phantom import PhantomSpec, ellipsoid_mask, generate_phantom, random_displacement, write_phantom
from atlasfuse.volume import read_atlas_dir, read_volume


def test_spec_validation():
    with pytest.raises(ValueError, match="does not fit"):
        PhantomSpec(dims=(20, 20, 20), semi_axes=(8, 4, 4))
    with pytest.raises(ValueError):
        PhantomSpec(n_atlases=0)
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"warp": 3})
    spec = PhantomSpec.from_dict({"dims": [30, 30, 30], "semi_axes": [8, 5, 5], "seed": 4})
    assert spec.dims == (30, 30, 30)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


def test_ellipsoid_membership():
    spec = PhantomSpec()
    m = ellipsoid_mask(spec)
    c = spec.shape_center
    assert m[int(c[0] + 11.5), int(round(c[1])), int(round(c[2]))]
    assert not m[int(c[0] + 12.6), int(round(c[1])), int(round(c[2]))]
    assert abs(m.sum() - 4 / 3 * np.pi * 12 * 6 * 7) < 0.05 * m.sum()


def test_identity_warp_no_noise():
    ph = generate_phantom(PhantomSpec(dims=(24, 24, 24), semi_axes=(7, 4, 5), noise_sigma=0, warp_amp=0, n_atlases=3))
    for atlas in ph.atlases:
        assert atlas.label == ph.truth
        np.testing.assert_array_equal(atlas.image.data, ph.target.data)
    assert set(np.unique(ph.target.data)) == {40.0, 100.0}


def test_deterministic():
    spec = PhantomSpec(dims=(24, 24, 24), semi_axes=(7, 4, 5), n_atlases=3, seed=11)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a.target == b.target and a.truth == b.truth
    assert all(x.image == y.image and x.label == y.label for x, y in zip(a.atlases, b.atlases))
    c = generate_phantom(PhantomSpec(dims=(24, 24, 24), semi_axes=(7, 4, 5), n_atlases=3, seed=12))
    assert not c.target == a.target


def test_displacement_bound(rng):
    for amp in (0.5, 2.0, 3.0):
        d = random_displacement((20, 18, 16), amp, 3.0, rng)
        assert d.shape == (3, 20, 18, 16)
        assert np.sqrt((d ** 2).sum(axis=0)).max() <= amp + 1e-12
    assert not random_displacement((5, 5, 5), 0.0, 2.0, rng).any()


def test_default_warp_dice_range():
    ph = generate_phantom(PhantomSpec(n_atlases=6, seed=5))
    scores = [dice(a.label, ph.truth) for a in ph.atlases]
    assert all(0.7 < s < 1.0 for s in scores), scores


def test_write_phantom(tmp_path):
    spec = PhantomSpec(dims=(24, 24, 24), semi_axes=(7, 4, 5), n_atlases=3)
    ph = generate_phantom(spec)
    d = write_phantom(ph, tmp_path / "ph")
    names = sorted(p.name for p in d.iterdir())
    assert names == sorted(
        ["spec.json", "target.json", "target.raw", "truth.json", "truth.raw"]
        + [f"atlas{i:02d}_{k}.{e}" for i in range(3) for k in ("img", "lbl") for e in ("json", "raw")]
    )
    assert read_volume(d / "target") == ph.target
    assert read_volume(d / "truth") == ph.truth
    atlas_names, atlases = read_atlas_dir(d)
    assert atlas_names == ["atlas00", "atlas01", "atlas02"]
    assert all(x.label == y.label for x, y in zip(atlases, ph.atlases))
    assert PhantomSpec.from_dict(json.loads((d / "spec.json").read_text())) == spec
