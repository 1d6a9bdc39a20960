import hashlib

import numpy as np
import pytest

from ovvad import data, model, nas, train
from ovvad.errors import UsageError
from ovvad.losses import LossBreakdown


def tiny_corpus(tmp_path, seed=0, **kw):
    cfg = data.SyntheticConfig(c=12, videos_per_class=4, n_normal=8,
                               video_length_range=(20, 30), segment_length_range=(4, 6),
                               seed=seed, **kw)
    return data.gen_synthetic(cfg, tmp_path)


def tiny_train_config(**kw):
    base = dict(stage1_lr=1e-3, stage1_epochs=3, batch_size=4, sigma=1.0,
                stage2_lr=1e-3, stage2_epochs=2, pseudo_per_batch=4, base_per_batch=4,
                seed=0)
    base.update(kw)
    return train.TrainConfig(**base)


def dir_hashes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestStage1:
    def test_zero_lr_is_identity(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config(stage1_lr=0.0, weight_decay=0.0, stage1_epochs=2)
        params, _ = train.train_stage1(man, cfg)
        bank = model.load_knowledge_bank(man.resolve(man.knowledge_bank_path))
        fresh = model.ModelParams.init(
            man.feature_dim, bank, cfg.model_config(), np.random.default_rng([cfg.seed, 1])
        )
        for name, arr in params.tensors().items():
            assert np.array_equal(arr, getattr(fresh, name)), name

    def test_loss_decreases_on_separable_corpus(self, tmp_path):
        man = data.gen_synthetic(
            data.SyntheticConfig(mean_separation=5.0, videos_per_class=8, n_normal=16, seed=3),
            tmp_path,
        )
        cfg = train.TrainConfig(stage1_lr=1e-3, stage1_epochs=5, batch_size=8, sigma=2.0, seed=3)
        _, history = train.train_stage1(man, cfg)
        totals = [h.total for h in history]
        assert all(b < a for a, b in zip(totals, totals[1:])), totals

    def test_same_seed_identical_checkpoints(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config()
        blobs = []
        for run in range(2):
            params, _ = train.train_stage1(man, cfg)
            path = tmp_path / f"run{run}.ovck"
            model.save_checkpoint(params, path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_inputs_never_mutated(self, tmp_path):
        man = tiny_corpus(tmp_path)
        before = dir_hashes(tmp_path)
        train.train_stage1(man, tiny_train_config())
        assert dir_hashes(tmp_path) == before

    def test_divergence_aborts_with_last_finite(self, tmp_path, monkeypatch):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config(stage1_epochs=2)
        calls = {"n": 0}
        real = train.train_loss

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            total, breakdown = real(*args, **kwargs)
            if calls["n"] >= 3:
                breakdown.total = float("nan")
            return total, breakdown

        monkeypatch.setattr(train, "train_loss", poisoned)
        with pytest.raises(train.TrainingDiverged) as info:
            train.train_stage1(man, cfg)
        # the carried parameters are finite
        for arr in info.value.params.tensors().values():
            assert np.isfinite(arr).all()


class TestStage2:
    def _pseudo_set(self, man, rng):
        bank = nas.load_snippet_bank(man.resolve("snippet_bank.json"))
        normals = [
            (r.id, data.read_features(man.resolve(r.feature_path)))
            for r in man.split("train") if not r.is_abnormal
        ]
        return nas.build_pseudo_set(normals, bank, 4, rng)

    def test_requires_pseudo_videos(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config()
        bank = model.load_knowledge_bank(man.resolve(man.knowledge_bank_path))
        params = model.ModelParams.init(
            man.feature_dim, bank, cfg.model_config(), np.random.default_rng(0)
        )
        with pytest.raises(UsageError, match="empty"):
            train.finetune_stage2(params, [], man, cfg)

    def test_rejects_pseudo_without_gt(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config()
        pseudos = self._pseudo_set(man, np.random.default_rng(1))
        pseudos[0].frame_gt = None
        bank = model.load_knowledge_bank(man.resolve(man.knowledge_bank_path))
        params = model.ModelParams.init(
            man.feature_dim, bank, cfg.model_config(), np.random.default_rng(0)
        )
        with pytest.raises(UsageError, match="frame-level"):
            train.finetune_stage2(params, pseudos, man, cfg)

    def test_finetune_runs_and_preserves_input_params(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config()
        params, _ = train.train_stage1(man, cfg)
        snapshot = {k: v.copy() for k, v in params.tensors().items()}
        pseudos = self._pseudo_set(man, np.random.default_rng(2))
        tuned, history = train.finetune_stage2(params, pseudos, man, cfg)
        for name, arr in params.tensors().items():  # caller's params untouched
            assert np.array_equal(arr, snapshot[name])
        assert len(history) == cfg.stage2_epochs
        assert any(
            not np.array_equal(getattr(tuned, n), snapshot[n]) for n in snapshot
        )

    def test_novel_targets_are_valid(self, tmp_path):
        man = tiny_corpus(tmp_path)
        cfg = tiny_train_config(base_per_batch=0, lam=0.0)
        params, _ = train.train_stage1(man, cfg)
        pseudos = self._pseudo_set(man, np.random.default_rng(3))
        assert all(p.category.startswith("novel") for p in pseudos)
        tuned, history = train.finetune_stage2(params, pseudos, man, cfg)
        assert all(np.isfinite(h.total) for h in history)


class TestConfig:
    def test_rejects_negative_lambda(self):
        with pytest.raises(UsageError):
            train.TrainConfig(lam=-0.1)

    def test_rejects_unknown_keys(self):
        with pytest.raises(UsageError, match="unknown"):
            train.TrainConfig.from_dict({"learning_rate": 1e-4})

    def test_history_csv(self, tmp_path):
        rows = [
            LossBreakdown(l_bce=0.5, l_sim_n=0.1, total=0.6),
            LossBreakdown(l_bce=0.4, l_ce=0.2, l_sim_n=0.1, l_sim_a=0.3, total=1.0),
        ]
        path = tmp_path / "h.csv"
        train.save_history_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,l_bce,l_ce,l_sim_n,l_sim_a,l_bce2,l_ce2,total"
        assert lines[1].startswith("0,0.5")
        assert len(lines) == 3
