"""Scratch experiment: criterion-4 scale training + held-out WER reduction."""
import sys
import time

import numpy as np

from moefix.corpus import NoiseChannel, Tokenizer, build_mixture, load_sentence_pool
from moefix.metrics import evaluate, greedy_corrector
from moefix.model import ModelConfig, param_count
from moefix.tasks import TaskRegistry
from moefix.training import TrainConfig, new_run, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1.5e-3
pool_n = int(sys.argv[3]) if len(sys.argv) > 3 else 80
per_task = int(sys.argv[4]) if len(sys.argv) > 4 else 250
seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0

registry = TaskRegistry(["asr", "ocr", "typo"])
tok = Tokenizer(registry.names)
cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=128, n_layers=4, n_heads=4,
                  d_ff=256, n_experts=4, top_k=2, max_seq_len=288)
tcfg = TrainConfig(seed=seed, learning_rate=lr, epochs=epochs, batch_size_tokens=4096)
ckpt = new_run(cfg, tcfg, registry, tok)
print("params", param_count(ckpt.params), flush=True)

pool = load_sentence_pool(limit=pool_n)
channels = {k: NoiseChannel(k, 0.15) for k in registry.names}
train_ds = build_mixture(registry, channels, pool, per_task, 5, master_seed=11)
heldout = build_mixture(registry, channels, pool, 40, 5, master_seed=202)

t0 = time.perf_counter()
rows = train(ckpt, train_ds.samples).rows
print(f"train: {len(rows)} steps {time.perf_counter()-t0:.0f}s "
      f"loss {rows[0]['loss']:.3f} -> {rows[-1]['loss']:.3f}", flush=True)

t0 = time.perf_counter()
corrector = greedy_corrector(ckpt.params, ckpt.config, tok)
report = evaluate(heldout.samples, corrector)
print(f"eval: {time.perf_counter()-t0:.0f}s")
print(report.to_table())
print("relative reduction:", report.overall.relative_reduction)

print("\n--- sample corrections ---")
for s in heldout.samples[:8]:
    got = corrector(s)
    mark = "OK " if got == s.target else "DIFF"
    print(f"[{s.task.name}] {mark}")
    print(f"  hyp0: {s.hypotheses[0]}")
    print(f"  got : {got}")
    print(f"  want: {s.target}")

