#!/usr/bin/env python3
"""Linear probe on frozen clip embeddings from a trained checkpoint.

Trains only a linear classifier (SGD momentum 0.9, cosine decay, 100 epochs,
batch 32 by default) on the model's pooled clip representations and reports
train accuracy on the group-activity labels.
"""

import argparse

import numpy as np

from groundact import backbones as bb
from groundact import data as D
from groundact.model import make_batch
from groundact.training import linear_probe, load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--clips", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    vocab = bb.load_vocab()
    corpus = D.generate_corpus(seed=args.seed, num_clips=args.clips,
                               num_actors=2, t_total=cfg.model.frames,
                               raster=(cfg.model.raster_h, cfg.model.raster_w))
    anns = [a for _, a in corpus]
    batch = make_batch([c for c, _ in corpus],
                       [D.prompt_for(a) for a in anns],
                       cfg.model, vocab, anns)
    rep, _ = model.forward(batch)
    emb = rep.group.data.reshape(len(corpus), -1)
    labels = np.array([a.group_activity for a in anns])

    res = linear_probe(emb, labels, num_classes=len(D.GROUPS),
                       epochs=args.epochs, seed=args.seed)
    print(f"probe train accuracy over {args.clips} clips: "
          f"{res.train_accuracy:.3f}")


if __name__ == "__main__":
    main()
