import json

import numpy as np
import pytest

from spinelabel import localizer, phantom, reformation, volume_io
from spinelabel.core import AnnotationSet, Volume
from spinelabel.errors import InvalidLabel
from spinelabel.phantom import PhantomSpec, generate_dataset, generate_phantom


class TestGeneratePhantom:
    def test_centroid_count_and_order(self, lumbar_phantom):
        vol, ann = lumbar_phantom
        labels = ann.labels()
        assert [l.name for l in labels] == ["L1", "L2", "L3", "L4", "L5"]
        axis0 = [ann.position(l)[0] for l in labels]
        assert all(a < b for a, b in zip(axis0, axis0[1:]))

    def test_deterministic(self):
        spec = PhantomSpec(n_vertebrae=4, start_label="T5", seed=9)
        v1, a1 = generate_phantom(spec)
        v2, a2 = generate_phantom(spec)
        np.testing.assert_array_equal(v1.data, v2.data)
        assert a1.entries == a2.entries

    def test_seed_changes_volume(self):
        v1, _ = generate_phantom(PhantomSpec(seed=1))
        v2, _ = generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(v1.data, v2.data)

    @pytest.mark.parametrize("kwargs", [
        {"n_vertebrae": 0}, {"n_vertebrae": 27},
        {"start_label": 25, "n_vertebrae": 5},
    ])
    def test_invalid_ranges(self, kwargs):
        with pytest.raises(InvalidLabel):
            generate_phantom(PhantomSpec(**kwargs))

    def test_values_bounded_below(self, lumbar_phantom):
        vol, _ = lumbar_phantom
        assert vol.data.min() >= -1000.0

    def test_centroids_roundtrip_heatmap_argmax(self, lumbar_phantom):
        vol, ann = lumbar_phantom
        stack = reformation.make_heatmap_3d(vol, ann, 4.0)
        for label in ann.labels():
            channel = stack.data[..., label.index]
            idx = np.unravel_index(np.argmax(channel), channel.shape)
            assert idx == vol.physical_to_voxel(ann.position(label))
            assert channel[idx] == 1.0

    def test_nifti_roundtrip(self, tmp_path, lumbar_phantom):
        vol, _ = lumbar_phantom
        path = tmp_path / "p.nii.gz"
        volume_io.save_volume(vol, path)
        np.testing.assert_array_equal(volume_io.load_volume(path).data, vol.data)


@pytest.fixture(scope="module")
def rib_phantom():
    spec = PhantomSpec(n_vertebrae=6, start_label="T4", spacing_mm=22.0,
                       include_ribs=True, resolution_mm=4.0, seed=21)
    return generate_phantom(spec)


class TestRibs:
    def test_rib_mask_nonempty(self, rib_phantom):
        vol, ann = rib_phantom
        assert phantom.rib_mask(vol, ann).sum() > 0

    def test_naive_mip_differs_from_localized_on_rib_pixels(self, rib_phantom):
        vol, ann = rib_phantom
        mask = phantom.rib_mask(vol, ann)
        target = localizer.localizer_target(vol, ann)
        box = localizer.extract_bbox(target, pad_vox=5)
        rib_vol = Volume(mask.astype(np.float32), vol.spacing, vol.origin)
        for view in ("sagittal", "coronal"):
            naive = reformation.project(rib_vol, reformation.ProjectionSpec(view=view))
            local = reformation.project(rib_vol, reformation.ProjectionSpec(
                view=view, kind="localized_mip", box=box))
            assert naive.max() > 0, f"{view}: naive MIP should contain rib pixels"
            assert local.max() == 0, f"{view}: localized MIP should exclude all ribs"

    def test_ribs_only_on_thoracic_phantoms(self):
        spec = PhantomSpec(n_vertebrae=4, start_label="L1", include_ribs=True,
                           resolution_mm=4.0, seed=3)
        vol, ann = generate_phantom(spec)
        assert phantom.rib_mask(vol, ann).sum() == 0


class TestGenerateDataset:
    def test_mixed_policy_covers_regions(self, tmp_path):
        man = generate_dataset(tmp_path, 4, "mixed", seed=0, spacing_mm=16.0)
        manifest = json.loads(man.read_text())
        regions = {s["region"] for s in manifest["scans"]}
        assert {"cervical", "thoracic", "lumbar"} <= regions
        assert len(manifest["scans"]) == 4

    def test_splits_disjoint_and_complete(self, tmp_path):
        man = generate_dataset(tmp_path, 8, "lumbar", seed=1, spacing_mm=16.0)
        splits = json.loads(man.read_text())["splits"]
        ids = [i for v in splits.values() for i in v]
        assert len(ids) == len(set(ids)) == 8

    def test_invalid_split_fractions(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, 2, "lumbar", split=(0.5, 0.2, 0.2))

    def test_files_exist_and_load(self, tmp_path):
        man = generate_dataset(tmp_path, 2, "cervical", seed=2, spacing_mm=16.0)
        manifest = json.loads(man.read_text())
        for scan in manifest["scans"]:
            vol = volume_io.load_volume(tmp_path / scan["volume"])
            ann = AnnotationSet.load(tmp_path / scan["annotations"])
            for label in ann.labels():
                assert vol.contains(ann.position(label))

    def test_invalid_policy(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(tmp_path, 2, "axial")
