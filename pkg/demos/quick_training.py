"""Train the toy model briefly on a small input size and report held-out metrics.

Run with ``python3 demos/quick_training.py``; it finishes in well under a
minute on one core. Use the ``camofreq train`` command for the full-size run.
"""
from camofreq.pipeline import ModelConfig, default_datasets, evaluate, fit

cfg = ModelConfig(input_hw=(64, 64), steps=120, batch_size=4, seed=5)
train, test = default_datasets(cfg, n_train=64, n_test=16)

params, log = fit(train, cfg, log_every=40)
print(f"loss {log.losses[0]:.3f} -> {log.losses[-1]:.3f} over {cfg.steps} steps")
result = evaluate(test, params, cfg)
print("held-out", {k: round(v, 4) for k, v in result.as_row().items()})
