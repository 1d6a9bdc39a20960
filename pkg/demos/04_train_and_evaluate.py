"""Stage-1 weakly supervised training, end to end.

Balanced batches of normal/abnormal videos, the composite weak loss
(video-level Top-K BCE + category cross entropy + knowledge-similarity
contrast), AdamW updates through the reverse-mode tape, then the frame-level
AUC/AP report split by base/novel categories.
"""

import tempfile

from ovvad.data import SyntheticConfig, gen_synthetic
from ovvad.evaluation import evaluate
from ovvad.model import load_class_catalog
from ovvad.train import TrainConfig, train_stage1

with tempfile.TemporaryDirectory() as td:
    manifest = gen_synthetic(SyntheticConfig(seed=7), td)
    cfg = TrainConfig(stage1_lr=1e-3, batch_size=16, stage1_epochs=20, sigma=2.0, seed=7)
    params, history = train_stage1(manifest, cfg)

    print("loss trajectory (every 4th epoch):")
    for epoch in range(0, len(history), 4):
        row = history[epoch]
        print(
            f"  epoch {epoch:2d}: total {row.total:6.3f}  "
            f"bce {row.l_bce:5.3f}  ce {row.l_ce:5.3f}  "
            f"sim_n {row.l_sim_n:5.3f}  sim_a {row.l_sim_a:5.3f}"
        )

    catalog = load_class_catalog(manifest.resolve(manifest.class_catalog_path))
    report = evaluate(params, manifest, catalog, cfg.model_config())
    print("\nheld-out report:")
    for name, value in report.scalars().items():
        print(f"  {name:10s}: {'n/a' if value is None else f'{value:.4f}'}")
    print("\nbase detection is strong; novel detection waits for fine-tuning (demo 05)")
