"""Class-incremental classification with the GAN memory as a replay source.

    python demos/03_lifelong_replay.py

Four tasks of three classes arrive one after another. The classifier must
tell all classes seen so far apart, with no task label at test time.
  naive   trains on the current task only and forgets earlier ones;
  joint   keeps every real image (an upper bound, not lifelong);
  replay  learns a conditional style per task and mixes generated images of
          every earlier task into each batch.
"""
import argparse

import torch

from ganmem.data import make_dataset
from ganmem.models import ArchConfig
from ganmem.replay import ClassifierConfig, make_task_stream, run_lifelong
from ganmem.training import TrainHyper, pretrain_base

p = argparse.ArgumentParser()
p.add_argument("--pretrain-steps", type=int, default=600)
p.add_argument("--gan-steps", type=int, default=1000)
p.add_argument("--classifier-steps", type=int, default=200)
args = p.parse_args()
torch.set_num_threads(1)

arch = ArchConfig(noise_dim=32, image_size=16, n_blocks=2, block_channel_schedule=(32, 16))
source = make_dataset("source", 1024, arch.image_size, seed=1)
base, _ = pretrain_base(arch, source, TrainHyper(lr=5e-4, steps=args.pretrain_steps, batch_size=32), seed=0)

stream = make_task_stream(4, 3, n_train=200, n_test=100, size=arch.image_size)
classifier = ClassifierConfig(lr=1e-3, steps_per_task=args.classifier_steps)
gan = TrainHyper(lr=1e-3, steps=args.gan_steps, batch_size=32, seed=100)

for mode in ("naive", "joint", "replay"):
    result = run_lifelong(stream, classifier, gan, mode, base=base)
    curve = "  ".join(f"{r['all_seen']:.2f}" for r in result.records)
    print(f"{mode:>6}: accuracy on all seen classes after each task  {curve}")
