"""Adversarial training loop, evaluation reports, and checkpointing."""

import numpy as np
import pytest

from toymodels import TinyConvNet, TinyLinear

from robnas.attacks import AttackConfig, accuracy, pgd
from robnas.autodiff import Tensor, backward, cross_entropy, no_grad
from robnas.blocks import bn_stats_frozen, parameter_checksum
from robnas.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_network_state,
    network_state,
    save_checkpoint,
)
from robnas.data import DatasetSpec, batch_indices, synth_blobs
from robnas.optim import SGDMomentum
from robnas.train import (
    EvalReport,
    TrainConfig,
    TrainingDivergence,
    adversarial_train,
    evaluate,
)

NO_ATTACK = AttackConfig(kind="pgd", epsilon=0.0, step_size=0.01, steps=1,
                         random_init=False)


def toy_dataset(seed=0, n_train=64, n_test=32, image_size=4, separation=0.25):
    return synth_blobs(DatasetSpec(image_size=image_size, class_count=2,
                                   n_train=n_train, n_test=n_test,
                                   separation=separation, noise=0.15,
                                   rng_seed=seed))


class TestTrainConfig:
    def test_defaults_follow_final_training_protocol(self):
        cfg = TrainConfig()
        assert cfg.epochs == 200
        assert cfg.lr == 0.1 and cfg.momentum == 0.9
        assert cfg.weight_decay == 1e-4
        assert cfg.decay_epochs == (100, 150)
        assert cfg.batch_size == 32
        assert cfg.attack.epsilon == pytest.approx(8 / 255)
        assert cfg.attack.steps == 7

    def test_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            TrainConfig(decay_epochs=(150, 100)).validate()
        with pytest.raises(ValueError, match="before"):
            TrainConfig(epochs=100, decay_epochs=(100, 150)).validate()


class TestAdversarialTrain:
    def test_zero_epsilon_reduces_to_standard_training(self):
        data = toy_dataset()
        cfg = TrainConfig(epochs=3, batch_size=16, lr=0.2, momentum=0.9,
                          weight_decay=1e-4, decay_epochs=(), attack=NO_ATTACK,
                          rng_seed=5)
        net = TinyLinear(image_size=4, rng=np.random.default_rng(1))
        adversarial_train(net, data, cfg)

        # reference: plain training with identical shuffles and optimizer
        ref = TinyLinear(image_size=4, rng=np.random.default_rng(1))
        opt = SGDMomentum(momentum=0.9, weight_decay=1e-4)
        rng = np.random.default_rng(5)
        for _ in range(3):
            for idx in batch_indices(data.train_x.shape[0], 16, rng):
                ref.train(True)
                loss = cross_entropy(ref(Tensor(data.train_x[idx])),
                                     data.train_y[idx])
                opt.step(ref, backward(loss), 0.2)
                with no_grad(), bn_stats_frozen():
                    cross_entropy(ref(Tensor(data.train_x[idx])),
                                  data.train_y[idx])
        assert parameter_checksum(net) == parameter_checksum(ref)

    def test_training_improves_adversarial_accuracy(self):
        # before/after comparison on three seeds
        attack = AttackConfig(kind="pgd", epsilon=8 / 255, step_size=2 / 255,
                              steps=7, rng_seed=0)
        improved = 0
        for seed in range(3):
            data = toy_dataset(seed=seed, n_train=96, n_test=64)
            net = TinyLinear(image_size=4, rng=np.random.default_rng(seed))
            before = _adv_accuracy(net, data, attack)
            cfg = TrainConfig(epochs=20, batch_size=32, lr=0.3,
                              decay_epochs=(), attack=attack, rng_seed=seed)
            adversarial_train(net, data, cfg)
            after = _adv_accuracy(net, data, attack)
            improved += after > before
        assert improved >= 3

    def test_curves_have_expected_fields(self):
        data = toy_dataset()
        cfg = TrainConfig(epochs=2, batch_size=32, decay_epochs=(),
                          attack=NO_ATTACK)
        net = TinyLinear(image_size=4)
        result = adversarial_train(net, data, cfg)
        assert len(result.curves) == 2
        row = result.curves[0]
        assert {"epoch", "lr", "train_adversarial_loss", "train_natural_loss",
                "test_natural_accuracy"} <= set(row)

    def test_divergence_aborts_with_last_checkpoint(self):
        data = toy_dataset()
        cfg = TrainConfig(epochs=4, batch_size=32, lr=1e100, decay_epochs=(),
                          attack=NO_ATTACK)
        net = TinyLinear(image_size=4, dtype=np.float64)
        with pytest.raises(TrainingDivergence) as err, \
                np.errstate(over="ignore", invalid="ignore"):
            adversarial_train(net, data, cfg)
        assert err.value.checkpoint is not None
        assert err.value.checkpoint.epoch >= 0


def _adv_accuracy(net, data, attack):
    adv = pgd(net, data.test_x, data.test_y, attack)
    return accuracy(net, adv, data.test_y)


class TestEvaluate:
    def test_empty_attack_list_gives_natural_only(self):
        data = toy_dataset()
        net = TinyLinear(image_size=4)
        report = evaluate(net, data.test_x, data.test_y, [])
        assert [r.label for r in report.rows] == ["natural"]

    def test_constant_network_scores_class_frequency(self):
        data = toy_dataset(n_test=40)
        net = TinyLinear(image_size=4)
        net.fc.replace_parameters({
            "weight": Tensor(np.zeros_like(net.fc.weight.data),
                             grad_required=True),
            "bias": Tensor(np.array([5.0, 0.0]), grad_required=True)})
        report = evaluate(net, data.test_x, data.test_y, [
            AttackConfig(kind="fgsm", epsilon=0.03, step_size=0.03, steps=1)])
        for row in report.rows:
            assert row.accuracy == pytest.approx(0.5)
            assert row.correct * 2 == row.total

    def test_attack_strength_ordering(self):
        # PGD^20 <= PGD^7 <= FGSM on adversarially trained toy models (mean
        # over 3 seeds).
        fgsm_acc, pgd7_acc, pgd20_acc = [], [], []
        for seed in range(3):
            data = toy_dataset(seed=seed, n_train=96, n_test=64)
            net = TinyLinear(image_size=4, rng=np.random.default_rng(seed))
            cfg = TrainConfig(epochs=15, batch_size=32, lr=0.3,
                              decay_epochs=(),
                              attack=AttackConfig(kind="pgd", epsilon=8 / 255,
                                                  step_size=2 / 255, steps=7,
                                                  rng_seed=seed),
                              rng_seed=seed)
            adversarial_train(net, data, cfg)
            report = evaluate(net, data.test_x, data.test_y, [
                AttackConfig(kind="fgsm", epsilon=8 / 255,
                             step_size=8 / 255, steps=1),
                AttackConfig(kind="pgd", epsilon=8 / 255, step_size=2 / 255,
                             steps=7, rng_seed=seed),
                AttackConfig(kind="pgd", epsilon=8 / 255, step_size=2 / 255,
                             steps=20, rng_seed=seed),
            ])
            fgsm_acc.append(report.rows[1].accuracy)
            pgd7_acc.append(report.rows[2].accuracy)
            pgd20_acc.append(report.rows[3].accuracy)
        assert np.mean(pgd20_acc) <= np.mean(pgd7_acc) + 1e-9
        assert np.mean(pgd7_acc) <= np.mean(fgsm_acc) + 1e-9

    def test_report_rendering(self):
        data = toy_dataset()
        net = TinyLinear(image_size=4)
        report = evaluate(net, data.test_x, data.test_y, [
            AttackConfig(kind="pgd", epsilon=0.03, step_size=0.01, steps=2)])
        text = report.render_text()
        assert "natural" in text and "pgd^2" in text
        doc = report.to_dict()
        assert doc["rows"][0]["label"] == "natural"
        assert isinstance(report, EvalReport)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        net = TinyConvNet(rng=np.random.default_rng(2))
        ckpt = Checkpoint(epoch=3, arrays=network_state(net),
                          config={"lr": 0.1}, rng_state=None,
                          meta={"note": "x"})
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_restores_parameters_and_buffers(self, tmp_path):
        net = TinyConvNet(rng=np.random.default_rng(2))
        net.bn.running_mean += 1.5  # make buffers non-trivial
        checksum = parameter_checksum(net)
        path = tmp_path / "net.ckpt"
        save_checkpoint(Checkpoint(epoch=0, arrays=network_state(net)), path)
        other = TinyConvNet(rng=np.random.default_rng(99))
        assert parameter_checksum(other) != checksum
        load_network_state(other, load_checkpoint(path).arrays)
        assert parameter_checksum(other) == checksum

    def test_corrupted_header_rejected(self, tmp_path):
        net = TinyLinear()
        path = tmp_path / "c.ckpt"
        save_checkpoint(Checkpoint(epoch=0, arrays=network_state(net)), path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_version_mismatch_reports_both_versions(self, tmp_path):
        net = TinyLinear()
        path = tmp_path / "v.ckpt"
        ckpt = Checkpoint(epoch=0, arrays=network_state(net), version=1)
        save_checkpoint(ckpt, path)
        raw = path.read_bytes()
        patched = raw.replace(b'"version":1', b'"version":9', 1)
        path.write_bytes(patched)
        with pytest.raises(CheckpointError, match="9.*version 1"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        net = TinyLinear()
        path = tmp_path / "t.ckpt"
        save_checkpoint(Checkpoint(epoch=0, arrays=network_state(net)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        data = toy_dataset(seed=3)
        attack = AttackConfig(kind="pgd", epsilon=0.02, step_size=0.01,
                              steps=2, rng_seed=0)

        def fresh():
            return TinyConvNet(image_size=4, rng=np.random.default_rng(8))

        full_cfg = TrainConfig(epochs=4, batch_size=32, lr=0.1,
                               decay_epochs=(), attack=attack, rng_seed=2)
        net_full = fresh()
        result_full = adversarial_train(net_full, data, full_cfg)

        half_cfg = TrainConfig(epochs=2, batch_size=32, lr=0.1,
                               decay_epochs=(), attack=attack, rng_seed=2)
        net_half = fresh()
        half = adversarial_train(net_half, data, half_cfg)
        path = tmp_path / "half.ckpt"
        save_checkpoint(half.checkpoint, path)

        resumed_net = fresh()
        resumed = adversarial_train(resumed_net, data, full_cfg,
                                    resume_from=load_checkpoint(path))
        assert parameter_checksum(resumed_net) == parameter_checksum(net_full)
        assert resumed.curves == result_full.curves[2:]
