"""Diagnose gate alignment: renormalized vs raw pair weights in task routing."""
import sys
import time

import numpy as np

from moefix import autodiff as ad
from moefix.corpus import NoiseChannel, Tokenizer, build_mixture, load_sentence_pool
from moefix.model import ModelConfig, forward
from moefix.tasks import TaskRegistry
from moefix.training import (TrainConfig, encode_samples, make_batch_arrays, new_run,
                             route_stats_over, train)

renorm = sys.argv[1] != "raw" if len(sys.argv) > 1 else True
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0

registry = TaskRegistry(["asr", "ocr", "typo"])
tok = Tokenizer(registry.names)
pool = load_sentence_pool(limit=40)
channels = {k: NoiseChannel(k, 0.15) for k in registry.names}
train_ds = build_mixture(registry, channels, pool, 150, 5, master_seed=31)
probe = build_mixture(registry, channels, pool, 15, 5, master_seed=77)

cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=48, n_layers=2, n_heads=4,
                  d_ff=96, n_experts=4, top_k=2, max_seq_len=288)
tcfg = TrainConfig(seed=seed, learning_rate=3e-3, epochs=epochs, batch_size_tokens=2048)
ckpt = new_run(cfg, tcfg, registry, tok)

# monkeypatch the pair-weight mode through the forward default
if not renorm:
    import moefix.model as mm
    import moefix.moe as moemod
    orig = moemod.moe_forward_task
    def raw_task(x, params, task_expert, renormalize_pair=True):
        return orig(x, params, task_expert, renormalize_pair=False)
    mm.moe_forward_task = raw_task

t0 = time.perf_counter()
rows = train(ckpt, train_ds.samples).rows
print(f"renorm={renorm} seed={seed}: {len(rows)} steps {time.perf_counter()-t0:.0f}s "
      f"final loss {rows[-1]['loss']:.3f} map={ckpt.expert_map.assignment}", flush=True)

# mean pair weight on the forced expert per task, on probe data (train-mode forward)
enc, _ = encode_samples(probe.samples, tok, ckpt.expert_map, cfg.max_seq_len)
for task in registry:
    batch = [e for e in enc if e.task_name == task.name][:8]
    arrays = make_batch_arrays(batch, tok.pad_id)
    _, decisions = forward(ckpt.params, cfg, arrays[0], mode="train",
                           task_experts=arrays[3],
                           renormalize_pair=True)
    wf = np.mean([d.weights[:, 0].mean() for d in decisions])
    print(f"  {task.name}: mean pair weight on forced expert {wf:.3f}")

report = route_stats_over(ckpt, probe.samples)
for task in registry:
    e = ckpt.expert_map.expert_for(task)
    print(f"  {task.name}: inference top-2 hit on f(T)={e}: {report.fraction(task.name, e):.3f}")
