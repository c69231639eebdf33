"""Bond training, projector mixtures, sequential and parallel composition."""
import numpy as np
import pytest

from spacebond.bonds import (
    BondError,
    ProjectorEnsemble,
    compose_sequential_parallel,
    displaced_bundle,
    ensemble_apply,
    load_bond_artifact,
    save_bond_artifact,
    train_combination_bond,
    train_displacement_bond,
)
from spacebond.neural import TrainConfig, init_projector, projector_forward
from spacebond.store import EmbeddingMatrix, SpaceBundle


@pytest.fixture(scope="module")
def displacement_artifact(mini_spaces, mini_train_cfg, mini_indices):
    train_idx, _ = mini_indices
    return train_displacement_bond(
        mini_spaces["unified"], mini_spaces["vt_expert"], train_idx,
        mini_train_cfg, temperature=0.01, seed=42,
    )


@pytest.fixture(scope="module")
def combination_artifact(mini_spaces, mini_train_cfg, mini_indices):
    train_idx, _ = mini_indices
    return train_combination_bond(
        mini_spaces["unified"], mini_spaces["at_expert"], train_idx,
        mini_train_cfg, temperature=0.01, seed=43,
    )


class TestEnsemble:
    def test_single_member_equals_projector(self):
        p = init_projector(8, 6, hidden=10, seed=1).astype(np.float32)
        ens = ProjectorEnsemble(tags=("T",), projectors=(p,))
        x = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
        np.testing.assert_array_equal(ensemble_apply(ens, x), projector_forward(p, x))

    def test_duplicated_members_equal_single(self):
        p = init_projector(8, 6, hidden=10, seed=2).astype(np.float32)
        ens = ProjectorEnsemble(tags=("a", "b", "c", "d", "e", "f", "g"),
                                projectors=(p,) * 7)
        x = np.random.default_rng(1).standard_normal((5, 8)).astype(np.float32)
        assert np.abs(
            ensemble_apply(ens, x).astype(np.float64)
            - projector_forward(p, x).astype(np.float64)
        ).max() < 1e-6

    def test_two_member_mean_hand_example(self):
        # constant-output members emitting [1,0] and [0,1]: the mean is
        # [0.5,0.5], which renormalizes to the diagonal direction
        from spacebond.neural import Projector

        def constant(row):
            return Projector(
                layers=((np.zeros((3, 2), dtype=np.float32),
                         np.array(row, dtype=np.float32)),),
                activation="identity",
            )

        ens = ProjectorEnsemble(
            tags=("a", "b"),
            projectors=(constant([1.0, 0.0]), constant([0.0, 1.0])),
        )
        x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
        out = ensemble_apply(ens, x)
        np.testing.assert_allclose(
            out, np.full((4, 2), 0.70710678), atol=1e-6
        )

    def test_empty_rejected(self):
        with pytest.raises(BondError):
            ProjectorEnsemble(tags=(), projectors=())

    def test_dim_disagreement_rejected(self):
        p1 = init_projector(8, 6, hidden=4, seed=1)
        p2 = init_projector(8, 7, hidden=4, seed=1)
        with pytest.raises(BondError):
            ProjectorEnsemble(tags=("a", "b"), projectors=(p1, p2))


class TestDisplacementBond:
    def test_structure(self, displacement_artifact, mini_spaces):
        art = displacement_artifact
        assert art.kind == "displacement"
        assert len(art.ensemble.projectors) == 7
        assert art.ensemble.d_in == mini_spaces["unified"].dim
        assert art.ensemble.d_out == mini_spaces["vt_expert"].dim
        assert art.direction == "unified->vt_expert"

    def test_seed_determinism(self, mini_spaces, mini_train_cfg, mini_indices):
        train_idx, _ = mini_indices
        cfg = TrainConfig(epochs=1, batch_size=60, hidden=16, seed=5)
        a = train_displacement_bond(
            mini_spaces["unified"], mini_spaces["vt_expert"], train_idx, cfg, seed=7
        )
        b = train_displacement_bond(
            mini_spaces["unified"], mini_spaces["vt_expert"], train_idx, cfg, seed=7
        )
        for p1, p2 in zip(a.ensemble.projectors, b.ensemble.projectors):
            for (w1, _), (w2, _) in zip(p1.layers, p2.layers):
                np.testing.assert_array_equal(w1, w2)

    def test_epoch_losses_recorded(self, displacement_artifact, mini_train_cfg):
        for tag in displacement_artifact.ensemble.tags:
            assert len(displacement_artifact.epoch_losses[tag]) == mini_train_cfg.epochs

    def test_modality_subset_required(self, mini_spaces, mini_train_cfg, mini_indices):
        train_idx, _ = mini_indices
        audio_only = SpaceBundle(
            name="audio_only", dim=mini_spaces["unified"].dim,
            modalities={"audio": mini_spaces["unified"].matrix("audio")},
        )
        with pytest.raises(BondError, match="not a subset"):
            train_displacement_bond(
                audio_only, mini_spaces["vt_expert"], train_idx, mini_train_cfg
            )

    def test_no_shared_ids_rejected(self, mini_spaces, mini_train_cfg, mini_indices):
        train_idx, _ = mini_indices
        vt = mini_spaces["vt_expert"]
        renamed = SpaceBundle(
            name="renamed", dim=vt.dim,
            modalities={
                tag: EmbeddingMatrix(
                    ids=tuple(f"x{i}" for i in range(vt.matrix(tag).n)),
                    data=vt.matrix(tag).data,
                )
                for tag in vt.tags
            },
        )
        with pytest.raises(BondError, match="no shared ids"):
            train_displacement_bond(
                mini_spaces["unified"], renamed, train_idx, mini_train_cfg
            )


class TestCombinationBond:
    def test_structure(self, combination_artifact, mini_spaces):
        art = combination_artifact
        assert art.kind == "combination"
        assert art.ensemble.d_in == mini_spaces["at_expert"].dim
        assert art.ensemble.d_out == mini_spaces["unified"].dim
        assert art.direction == "at_expert->unified"

    def test_artifact_round_trip(self, combination_artifact, tmp_path):
        save_bond_artifact(combination_artifact, tmp_path / "bond")
        back = load_bond_artifact(tmp_path / "bond")
        assert back.kind == combination_artifact.kind
        assert back.ensemble.tags == combination_artifact.ensemble.tags
        x = np.random.default_rng(2).standard_normal(
            (6, combination_artifact.ensemble.d_in)
        ).astype(np.float32)
        np.testing.assert_array_equal(
            ensemble_apply(back.ensemble, x),
            ensemble_apply(combination_artifact.ensemble, x),
        )
        assert back.epoch_losses == combination_artifact.epoch_losses


class TestDisplacedBundle:
    def test_expert_channels_untouched(self, displacement_artifact, mini_spaces):
        frozen = displaced_bundle(
            mini_spaces["unified"], mini_spaces["vt_expert"], displacement_artifact
        )
        np.testing.assert_array_equal(
            frozen.matrix("image").data, mini_spaces["vt_expert"].matrix("image").data
        )
        np.testing.assert_array_equal(
            frozen.matrix("text").data, mini_spaces["vt_expert"].matrix("text").data
        )
        assert frozen.dim == mini_spaces["vt_expert"].dim

    def test_audio_is_projection(self, displacement_artifact, mini_spaces):
        frozen = displaced_bundle(
            mini_spaces["unified"], mini_spaces["vt_expert"], displacement_artifact
        )
        expected = displacement_artifact.ensemble.apply(
            mini_spaces["unified"].matrix("audio").data
        )
        np.testing.assert_array_equal(frozen.matrix("audio").data, expected)

    def test_wrong_kind_rejected(self, combination_artifact, mini_spaces):
        with pytest.raises(BondError):
            displaced_bundle(
                mini_spaces["unified"], mini_spaces["vt_expert"], combination_artifact
            )


@pytest.fixture(scope="module")
def product(mini_spaces, mini_indices):
    train_idx, _ = mini_indices
    cfg = TrainConfig(epochs=1, batch_size=60, hidden=16, seed=5)
    return compose_sequential_parallel(
        mini_spaces["unified"], mini_spaces["vt_expert"],
        [mini_spaces["at_expert"]], train_idx,
        displacement_cfg=cfg, combination_cfg=cfg, seed=50,
    )


class TestSequentialParallel:

    def test_stage_two_targets_frozen_stage_one(self, product, mini_spaces):
        # stage-1 inputs stay bitwise intact after stage-2 training
        rebuilt = displaced_bundle(
            mini_spaces["unified"], mini_spaces["vt_expert"], product.displacement
        )
        for tag in ("audio", "image", "text"):
            np.testing.assert_array_equal(
                product.displaced.matrix(tag).data, rebuilt.matrix(tag).data
            )

    def test_combination_dims_match_displaced_space(self, product, mini_spaces):
        art = product.combinations[0]
        assert art.ensemble.d_in == mini_spaces["at_expert"].dim
        assert art.ensemble.d_out == mini_spaces["vt_expert"].dim
        assert product.unrepaired_audio

    def test_zero_at_experts(self, mini_spaces, mini_indices):
        train_idx, _ = mini_indices
        cfg = TrainConfig(epochs=1, batch_size=60, hidden=16, seed=5)
        product = compose_sequential_parallel(
            mini_spaces["unified"], mini_spaces["vt_expert"], [], train_idx,
            displacement_cfg=cfg, combination_cfg=cfg, seed=50,
        )
        assert product.combinations == ()

    def test_two_at_experts_channel_structure(self, mini_spaces, mini_world, mini_indices):
        # one image-text expert plus two audio-text experts: text mixes four
        # channels, audio three, image two
        from spacebond.fuse import build_composite
        from spacebond.synth import SpaceSpec, realize_space

        second_at = realize_space(
            mini_world,
            SpaceSpec("at_expert_2", 18, ("audio", "text"),
                      {"audio": 0.6, "text": 1.0}, seed=14),
        )
        train_idx, _ = mini_indices
        cfg = TrainConfig(epochs=1, batch_size=60, hidden=16, seed=5)
        product = compose_sequential_parallel(
            mini_spaces["unified"], mini_spaces["vt_expert"],
            [mini_spaces["at_expert"], second_at], train_idx,
            displacement_cfg=cfg, combination_cfg=cfg, seed=51,
        )
        composite = build_composite(
            "unified", mini_spaces["vt_expert"].dim,
            displacement=product.displacement.ensemble, vt_name="vt_expert",
            combinations=tuple(
                (a.source_space, a.ensemble) for a in product.combinations
            ),
        )
        assert composite.at_names == ("at_expert", "at_expert_2")
        assert [c.name for c in composite.channels["text"]] == [
            "unified", "vt_expert", "at_expert", "at_expert_2"
        ]
        assert [c.name for c in composite.channels["audio"]] == [
            "unified", "at_expert", "at_expert_2"
        ]
        assert [c.name for c in composite.channels["image"]] == [
            "unified", "vt_expert"
        ]

    def test_stage_two_order_independent(self, mini_spaces, mini_indices):
        # Two at-experts trained in either order produce identical artifacts
        # because they share only the frozen stage-1 space.
        from spacebond.bonds import train_combination_bond

        train_idx, _ = mini_indices
        cfg = TrainConfig(epochs=1, batch_size=60, hidden=16, seed=5)
        displacement = train_displacement_bond(
            mini_spaces["unified"], mini_spaces["vt_expert"], train_idx, cfg, seed=60
        )
        frozen = displaced_bundle(
            mini_spaces["unified"], mini_spaces["vt_expert"], displacement
        )
        at1 = mini_spaces["at_expert"]

        def weights(artifact):
            return artifact.ensemble.projectors[0].layers[0][0]

        first = train_combination_bond(frozen, at1, train_idx, cfg, seed=61)
        _other = train_combination_bond(frozen, at1, train_idx, cfg, seed=62)
        again = train_combination_bond(frozen, at1, train_idx, cfg, seed=61)
        np.testing.assert_array_equal(weights(first), weights(again))
