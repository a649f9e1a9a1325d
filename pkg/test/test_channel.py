import json
import math

import numpy as np
import pytest

from src.channel import (
    ArrayConfig,
    PathComponent,
    Scene,
    TwinPerturbation,
    aod_shift_bound,
    channel_matrix,
    dump_scene_json,
    generate_scene,
    load_scene,
    normalize_channels,
    perturb_to_twin,
    save_scene,
    scene_from_dict,
    steering_vector,
    synthesize_channel,
)
from src.errors import ArtifactFormatError, ConfigError, DomainError


def single_path_scene(paths):
    return Scene(
        ue_positions=((0.0, 50.0),),
        paths_per_ue=(tuple(paths),),
        rng_seed=0,
        los_fraction=1.0,
    )


class TestSteeringVector:
    def test_broadside(self):
        np.testing.assert_allclose(steering_vector(0.0, ArrayConfig(n_bs=4)), 0.5 * np.ones(4))

    def test_thirty_degrees_two_elements(self):
        b = steering_vector(math.pi / 6, ArrayConfig(n_bs=2))
        np.testing.assert_allclose(b, np.array([1.0, 1j]) / math.sqrt(2), atol=1e-12)

    def test_unit_norm_for_random_angles(self, array_cfg):
        rng = np.random.default_rng(0)
        for phi in rng.uniform(-1.5, 1.5, 1000):
            assert np.linalg.norm(steering_vector(phi, array_cfg)) == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("phi", [math.pi / 2, -math.pi / 2, 2.0, float("nan")])
    def test_rejects_angles_outside_front_half_plane(self, phi, array_cfg):
        with pytest.raises(DomainError):
            steering_vector(phi, array_cfg)


class TestGenerateScene:
    def test_same_seed_same_scene(self, array_cfg):
        assert generate_scene(1, array_cfg, seed=7, los_fraction=0.5) == generate_scene(
            1, array_cfg, seed=7, los_fraction=0.5
        )

    def test_full_site_every_ue_has_paths(self, array_cfg):
        scene = generate_scene(622, array_cfg, seed=1, los_fraction=0.5)
        assert scene.n_ue == 622
        assert all(len(paths) > 0 for paths in scene.paths_per_ue)

    def test_los_path_dominates(self, array_cfg):
        scene = generate_scene(50, array_cfg, seed=2, los_fraction=1.0)
        for paths in scene.paths_per_ue:
            los = [p for p in paths if p.is_los]
            assert len(los) == 1
            others = [abs(p.gain) for p in paths if not p.is_los]
            assert all(abs(los[0].gain) > g for g in others)

    def test_angles_inside_front_half_plane(self, scene):
        for paths in scene.paths_per_ue:
            assert all(abs(p.aod_rad) < math.pi / 2 for p in paths)

    def test_rejects_empty_scene(self, array_cfg):
        with pytest.raises(ConfigError):
            generate_scene(0, array_cfg, seed=0, los_fraction=0.5)


class TestPerturbToTwin:
    def test_zero_perturbation_returns_input(self, scene):
        assert perturb_to_twin(scene, TwinPerturbation(0.0, 0.0, 0.0), seed=1) is scene

    def test_shift_moves_angles_within_geometric_bound(self, scene):
        twin = perturb_to_twin(scene, TwinPerturbation(scatterer_shift_m=2.0), seed=4)
        bound = aod_shift_bound(scene, 2.0)
        assert bound > 0
        for original, moved in zip(scene.paths_per_ue, twin.paths_per_ue):
            assert len(original) == len(moved)
            for p, q in zip(original, moved):
                assert abs(p.aod_rad - q.aod_rad) <= bound + 1e-12
                if p.is_los:
                    assert p.aod_rad == q.aod_rad

    def test_drop_everything_keeps_only_los(self, array_cfg):
        scene = generate_scene(200, array_cfg, seed=9, los_fraction=1.0)
        twin = perturb_to_twin(scene, TwinPerturbation(0.0, 1.0, 0.0), seed=3)
        checked = 0
        for original, paths in zip(scene.paths_per_ue, twin.paths_per_ue):
            if len(original) == 3:
                checked += 1
                assert len(paths) == 1 and paths[0].is_los
        assert checked > 0

    def test_nlos_ue_keeps_strongest_path(self, array_cfg):
        scene = generate_scene(30, array_cfg, seed=9, los_fraction=0.0)
        twin = perturb_to_twin(scene, TwinPerturbation(0.0, 1.0, 0.0), seed=3)
        for original, paths in zip(scene.paths_per_ue, twin.paths_per_ue):
            assert len(paths) == 1
            assert abs(paths[0].gain) == pytest.approx(max(abs(p.gain) for p in original))

    def test_rejects_invalid_drop_probability(self):
        with pytest.raises(ConfigError):
            TwinPerturbation(path_drop_prob=1.5)


class TestSynthesizeChannel:
    def test_single_broadside_path(self):
        scene = single_path_scene([PathComponent(gain=1 + 0j, aod_rad=0.0, is_los=True)])
        np.testing.assert_allclose(synthesize_channel(scene, 0, ArrayConfig(n_bs=4)), 0.5 * np.ones(4))

    def test_symmetric_pair_is_real_cosine(self):
        phi = 0.3
        cfg = ArrayConfig(n_bs=8)
        scene = single_path_scene([PathComponent(1 + 0j, phi), PathComponent(1 + 0j, -phi)])
        i = np.arange(8)
        expected = 2.0 * np.cos(math.pi * i * math.sin(phi)) / math.sqrt(8)
        np.testing.assert_allclose(synthesize_channel(scene, 0, cfg), expected, atol=1e-12)

    def test_ue_out_of_range(self, scene, array_cfg):
        with pytest.raises(IndexError):
            synthesize_channel(scene, scene.n_ue, array_cfg)

    def test_normalization_peaks_at_one(self, scene, array_cfg):
        normalized, scale = normalize_channels(channel_matrix(scene, array_cfg))
        assert np.max(np.abs(normalized)) == pytest.approx(1.0, abs=1e-12)
        assert scale > 0


class TestScenePersistence:
    def test_binary_round_trip(self, scene, tmp_path):
        path = save_scene(scene, tmp_path / "scene.btsc")
        assert load_scene(path) == scene

    def test_json_round_trip(self, scene, tmp_path):
        path = dump_scene_json(scene, tmp_path / "scene.json")
        assert scene_from_dict(json.loads(path.read_text())) == scene

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "broken.btsc"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(ArtifactFormatError):
            load_scene(path)
