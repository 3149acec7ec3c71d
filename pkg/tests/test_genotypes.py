"""Layout rules, discretization against exhaustive enumeration, text format."""

import math

import numpy as np
import pytest

from robnas.blocks import N_OPS, OP_ORDER, OpKind
from robnas.genotypes import (
    CellKind,
    Genotype,
    SupernetConfig,
    discretize,
    discretize_matrix,
    edge_count,
    edge_offsets,
    genotype_from_text,
    genotype_to_text,
    load_genotype,
    random_genotype,
    save_genotype,
    with_config,
)
from robnas.supernet import ArchParams


def brute_force_discretize(alpha, nodes):
    """Enumeration oracle: explicit softmax, argmax, and edge ranking loops."""
    weights = np.empty_like(alpha, dtype=np.float64)
    for r in range(alpha.shape[0]):
        exps = [math.exp(v - max(alpha[r])) for v in alpha[r]]
        total = sum(exps)
        weights[r] = [e / total for e in exps]
    genes = []
    offsets = edge_offsets(nodes)
    for node in range(nodes):
        candidates = []
        for pred in range(2 + node):
            row = weights[offsets[node] + pred]
            best_op, best_w = 0, row[0]
            for o in range(1, len(row)):
                if row[o] > best_w:
                    best_op, best_w = o, row[o]
            candidates.append((pred, best_op, best_w))
        chosen = []
        remaining = list(candidates)
        for _ in range(2):
            best = remaining[0]
            for cand in remaining[1:]:
                if cand[2] > best[2]:
                    best = cand
            remaining.remove(best)
            chosen.append(best)
        chosen.sort(key=lambda c: c[0])
        genes.append(tuple((p, OP_ORDER[o]) for p, o, _ in chosen))
    return tuple(genes)


class TestConfigStructure:
    def test_default_8_cell_layout(self):
        cfg = SupernetConfig(total_cells=8, init_channels=24)
        kinds = cfg.cell_kinds()
        expected = [CellKind.ACCURATE, CellKind.ACCURATE, CellKind.REDUCTION,
                    CellKind.ACCURATE, CellKind.ACCURATE, CellKind.REDUCTION,
                    CellKind.ROBUST, CellKind.ROBUST]
        assert list(kinds) == expected
        assert cfg.resolved_reductions() == (2, 5)
        assert cfg.cell_channels() == (24, 24, 48, 48, 48, 48, 48, 48)

    def test_20_cell_layout(self):
        cfg = SupernetConfig(total_cells=20, init_channels=64)
        assert cfg.resolved_reductions() == (6, 13)
        channels = cfg.cell_channels()
        assert channels[5] == 64 and channels[6] == 128
        assert channels[13] == 128 and channels[19] == 128
        assert set(channels[:6]) == {64} and set(channels[6:]) == {128}

    def test_conventional_baseline_placement(self):
        cfg = SupernetConfig(total_cells=8, init_channels=24,
                             placement="A-A-A",
                             channel_multipliers=(1, 2, 4))
        kinds = cfg.cell_kinds()
        assert CellKind.ROBUST not in kinds
        assert cfg.cell_channels()[-1] == 96

    def test_validation_errors(self):
        with pytest.raises(ValueError, match="strictly inside"):
            SupernetConfig(total_cells=2).validate()
        with pytest.raises(ValueError, match="placement"):
            SupernetConfig(placement="A-A").validate()
        with pytest.raises(ValueError, match="segments"):
            SupernetConfig(channel_multipliers=(1, 2)).validate()
        with pytest.raises(ValueError, match="even"):
            SupernetConfig(init_channels=7).validate()
        SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                       class_count=2).validate()

    def test_dict_round_trip(self):
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        assert SupernetConfig.from_dict(cfg.to_dict()) == SupernetConfig(
            total_cells=4, init_channels=8, image_size=16, class_count=2,
            reduction_positions=(1, 2))

    def test_edge_bookkeeping(self):
        assert edge_count(4) == 14
        assert edge_offsets(4) == (0, 2, 5, 9)
        assert edge_count(1) == 2


class TestDiscretize:
    def test_unique_maximum_chosen_everywhere(self):
        nodes = 4
        alpha = np.zeros((edge_count(nodes), N_OPS))
        alpha[:, 3] = 5.0  # dil_conv_5x5 strictly dominates on every edge
        genes = discretize_matrix(_softmax(alpha), nodes)
        for pair in genes:
            for _, op in pair:
                assert op is OpKind.DIL_CONV_5X5

    def test_tie_breaks_lowest_indices(self):
        nodes = 2
        alpha = np.zeros((edge_count(nodes), N_OPS))  # all ties everywhere
        genes = discretize_matrix(_softmax(alpha), nodes)
        # Tied ops resolve to operation index 0; tied edges keep the lowest
        # predecessor indices.
        assert genes[0] == ((0, OP_ORDER[0]), (1, OP_ORDER[0]))
        assert genes[1] == ((0, OP_ORDER[0]), (1, OP_ORDER[0]))

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_brute_force_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        nodes = 4
        alpha = rng.normal(size=(edge_count(nodes), N_OPS))
        genes = discretize_matrix(_softmax(alpha), nodes)
        assert genes == brute_force_discretize(alpha, nodes)

    def test_full_discretize_over_arch_params(self, rng):
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        arch = ArchParams.initial(rng)
        genotype = discretize(arch, cfg)
        genotype.validate()
        for kind in CellKind:
            assert genes_match_matrix(genotype.cells[kind],
                                      arch.tensors[kind].data)

    def test_monotone_transform_leaves_argmax(self, rng):
        nodes = 4
        alpha = rng.normal(size=(edge_count(nodes), N_OPS))
        g1 = discretize_matrix(_softmax(alpha), nodes)
        g2 = discretize_matrix(_softmax(3.0 * alpha + 1.0), nodes)
        for pair1, pair2 in zip(g1, g2):
            ops1 = {p: o for p, o in pair1}
            ops2 = {p: o for p, o in pair2}
            shared = set(ops1) & set(ops2)
            assert all(ops1[p] == ops2[p] for p in shared)

    def test_rejects_non_finite(self, rng):
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        arch = ArchParams.initial(rng)
        arch.tensors[CellKind.ROBUST].data[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            discretize(arch, cfg)


def _softmax(alpha):
    e = np.exp(alpha - alpha.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def genes_match_matrix(genes, alpha):
    return genes == brute_force_discretize(np.asarray(alpha, dtype=np.float64),
                                           len(genes))


class TestSerialization:
    def test_text_round_trip_lossless(self, rng):
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        genotype = random_genotype(cfg, rng)
        text = genotype_to_text(genotype)
        parsed = genotype_from_text(text)
        assert parsed.cells == genotype.cells
        assert parsed.config.to_dict() == cfg.to_dict()
        assert genotype_to_text(parsed) == text

    def test_file_round_trip(self, rng, tmp_path):
        cfg = SupernetConfig(total_cells=8, init_channels=24)
        genotype = random_genotype(cfg, rng)
        path = tmp_path / "g.genotype"
        save_genotype(genotype, path)
        assert load_genotype(path).cells == genotype.cells

    def test_rejects_bad_header_and_version(self):
        with pytest.raises(ValueError, match="not a genotype"):
            genotype_from_text("something else\nconfig\n")
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        text = genotype_to_text(random_genotype(cfg, np.random.default_rng(0)))
        bumped = text.replace(" v1", " v9", 1)
        with pytest.raises(ValueError, match="v9"):
            genotype_from_text(bumped)

    def test_genotype_validation(self):
        cfg = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                             class_count=2)
        bad = Genotype(cells={CellKind.ACCURATE: (
            ((0, OpKind.IDENTITY), (0, OpKind.IDENTITY)),) * 4}, config=cfg)
        with pytest.raises(ValueError, match="duplicate"):
            bad.validate()

    def test_with_config_retargets(self, rng):
        small = SupernetConfig(total_cells=4, init_channels=8, image_size=16,
                               class_count=2)
        big = SupernetConfig(total_cells=8, init_channels=24)
        genotype = random_genotype(small, rng)
        assert with_config(genotype, big).config == big
