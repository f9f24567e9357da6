"""Scratch experiment: does forced task routing raise inference-time hit rate
on the mapped expert vs a plain-top-2 ablation, across seeds?"""
import sys
import time

import numpy as np

from moefix.corpus import NoiseChannel, Tokenizer, build_mixture, load_sentence_pool
from moefix.model import ModelConfig
from moefix.tasks import TaskRegistry
from moefix.training import TrainConfig, new_run, route_stats_over, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-3

registry = TaskRegistry(["asr", "ocr", "typo"])
tok = Tokenizer(registry.names)
pool = load_sentence_pool(limit=40)
channels = {k: NoiseChannel(k, 0.15) for k in registry.names}
train_ds = build_mixture(registry, channels, pool, 150, 5, master_seed=31)
probe = build_mixture(registry, channels, pool, 15, 5, master_seed=77)

for seed in (0, 1, 2):
    t0 = time.perf_counter()
    result = {}
    for routed in (True, False):
        cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=48, n_layers=2, n_heads=4,
                          d_ff=96, n_experts=4, top_k=2, max_seq_len=288)
        tcfg = TrainConfig(seed=seed, learning_rate=lr, epochs=epochs,
                           batch_size_tokens=2048, task_routing=routed)
        ckpt = new_run(cfg, tcfg, registry, tok)
        rows = train(ckpt, train_ds.samples).rows
        report = route_stats_over(ckpt, probe.samples)
        hits = {t.name: report.fraction(t.name, ckpt.expert_map.expert_for(t))
                for t in registry}
        result[routed] = (hits, rows[-1]["loss"], ckpt.expert_map.assignment)
    dt = time.perf_counter() - t0
    hits_r, loss_r, amap = result[True]
    hits_a, loss_a, _ = result[False]
    print(f"seed {seed} ({dt:.0f}s) map={amap} loss routed {loss_r:.3f} ablation {loss_a:.3f}")
    for name in registry.names:
        flag = "WIN " if hits_r[name] > hits_a[name] else "lose"
        print(f"  {name}: routed {hits_r[name]:.3f} vs ablation {hits_a[name]:.3f}  {flag}")
    sys.stdout.flush()
