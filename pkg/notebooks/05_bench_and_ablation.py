# %% [markdown]
# # Cost of dilation and component ablations
#
# The gathered path does the same nine multiply-adds per scale whatever the
# dilation.  Dense correlation with a (2s+1)x(2s+1) kernel grows with s
# squared.  The bench below uses 128x128 to stay quick; the CLI default is
# 256x256.

# %%
import tempfile
from pathlib import Path

from invkernel.ablation import run_ablation
from invkernel.bench import run_bench
from invkernel.dataset import generate_dataset
from invkernel.trainer import TaskSource, TrainConfig

for r in run_bench([(128, 128)], [(1, 2, 4), (1, 2, 16)], reps=2):
    print(f"scales {r.scales}: naive {r.naive_ms:7.1f} ms, fast {r.fast_ms:6.1f} ms, "
          f"max diff {r.max_abs_diff:.1e}")

# %% [markdown]
# Ablation retrains the model with pieces switched off.  Here each variant
# gets only 20 steps, so the numbers say nothing about which variant is
# better.  They just show the shape of the report.

# %%
work = Path(tempfile.mkdtemp())
man = generate_dataset("all", 18, (32, 32), 1, work / "data")
cfg = TrainConfig(total_steps=20, batch_size=2, patch_size=32, widths=(4, 8, 8), embed_dim=4, tam_hidden=4,
                  probe_count=2, log_every=10, checkpoint_every=20, out_dir=str(work / "ablate"),
                  task_mix=tuple(TaskSource(t, str(man), 1.0) for t in range(3)))
rows = run_ablation(cfg, ["one-stage", "no-um", "full", "no-tam", "no-multiscale"],
                    report=work / "ablation.csv")
print((work / "ablation.csv").read_text())
