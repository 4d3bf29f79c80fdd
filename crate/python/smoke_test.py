"""Smoke test for the pytimeeq extension module.

Build and stage the module first:

    cargo build --release -p timeeq-py
    cp target/release/libpytimeeq.so python/pytimeeq.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pytimeeq as tq


def main():
    data = tq.VideoSet.generate(n_classes=4, n_per_class=4, frames=64, size=24, seed=1)
    assert len(data) == 16
    n, t, h, w, c = data.shape
    assert (t, h, w, c) == (64, 24, 24, 3)
    assert len(data.video_bytes(0)) == t * h * w * c
    train, test = data.split(0.25)
    assert (len(train), len(test)) == (12, 4)

    tau = tq.TemporalTransform(speed_exponent=1, start_frame=3)
    assert tau.frame_indices(4) == [3, 5, 7, 9]
    rev = tq.TemporalTransform(1, 3, reverse=True)
    assert rev.frame_indices(4) == [9, 7, 5, 3]
    later = tq.TemporalTransform(0, 40)
    assert tq.overlap_order_label(tau, later, 8) == 0
    assert tq.overlap_order_label(later, tau, 8) == 2
    assert tq.overlap_order_label(tau, rev, 8) == 1

    assert abs(tq.similarity([1.0, 0.0], [2.0, 0.0]) - math.exp(1 / tq.LAMBDA)) < 1e-9
    loss, grad = tq.contrastive_loss([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], [0, 0, 1, 1])
    assert loss > 0 and len(grad) == 4

    cfg = tq.TrainConfig.preset("k")
    cfg.batch_size = 4
    cfg.epochs = 1
    cfg.clip_len = 8
    cfg.resolution = 16
    cfg.widths = [4, 4, 8, 16]
    cfg.validate()
    assert all(wt == 1.0 for wt in cfg.loss_weights())
    assert tq.TrainConfig.from_toml(cfg.to_toml()).widths == [4, 4, 8, 16]
    assert tq.TrainConfig.preset("e").loss_weights() == [0.0, 1.0, 0.0, 0.0, 0.0]

    trainer = tq.Trainer(cfg, len(train))
    records = trainer.train(train, 2)
    assert [r["step"] for r in records] == [0, 1]
    assert all(math.isfinite(r["total"]) for r in records)
    assert trainer.step == 2

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ckpt_2")
        trainer.save(path)
        back = tq.Trainer.load(path)
        assert back.step == 2
        a = trainer.train(train, 1)[0]["total"]
        b = back.train(train, 1)[0]["total"]
        assert a == b

    metrics = trainer.evaluate(train, test, temporal_crops=2, probes=8)
    assert 0.0 <= metrics["nn_accuracy"] <= 1.0
    assert len(metrics["recall"]) == 4

    try:
        tq.TrainConfig.preset("z")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print("pytimeeq smoke test passed")


if __name__ == "__main__":
    main()
