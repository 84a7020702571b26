"""Compressed style matrices sharing a knowledge base across related tasks.

    python demos/02_compressed_stream.py

Each task's conv scale/shift matrices in block B0 are written as the source
statistics plus reused knowledge-base directions plus a new low-rank
residual. After every task the residual is energy-truncated and its singular
vectors join the knowledge base, so later related tasks need fewer new
parameters. The printout compares parameter counts and FID surrogates with
plain (uncompressed) style training at the same seeds and steps.
"""
import argparse

import torch

from ganmem.compression import EnergyPolicy, KnowledgeBase, parameter_accounting, train_task_compressed
from ganmem.data import RELATED_STREAM, make_dataset
from ganmem.evaluation import FIDEvaluator
from ganmem.models import ArchConfig
from ganmem.training import TrainHyper, generate, pretrain_base, train_task

p = argparse.ArgumentParser()
p.add_argument("--pretrain-steps", type=int, default=600)
p.add_argument("--task-steps", type=int, default=300)
p.add_argument("--keep", type=float, default=95.0, help="percent of matrix energy kept in B0")
args = p.parse_args()
torch.set_num_threads(1)

arch = ArchConfig(noise_dim=32, image_size=16, n_blocks=2, block_channel_schedule=(32, 16))
source = make_dataset("source", 1024, arch.image_size, seed=1)
base, _ = pretrain_base(arch, source, TrainHyper(lr=5e-4, steps=args.pretrain_steps, batch_size=32), seed=0)
policy = EnergyPolicy(keep={"B0": args.keep}, r=0.005, refit_fraction=0.4)

kb = KnowledgeBase()
print("task  rank(G/B0/conv0/scale)  KB width  new/naive params  FID plain  FID compressed")
for t, domain in enumerate(RELATED_STREAM, start=1):
    data = make_dataset(domain, 1024, arch.image_size, seed=10 + t)
    ev = FIDEvaluator(data.images, n_samples=512)
    hyper = TrainHyper(lr=1e-3, steps=args.task_steps, batch_size=32, seed=t)
    plain, _ = train_task(base, data, hyper, task_id=t)
    compressed, kb, _ = train_task_compressed(base, data, hyper, kb, policy, task_id=t)
    acc = parameter_accounting(base, compressed)
    realized = compressed.realize(base, kb)
    key = "G/B0/conv0/scale"
    print(
        f"{t:>4}  {compressed.factors[key].rank:>22}  {kb.width(key):>8}  {acc['ratio']:>16.3f}"
        f"  {ev(lambda n, s: generate(base, plain, n, s)):>9.4f}"
        f"  {ev(lambda n, s: generate(base, realized, n, s)):>14.4f}"
    )
