"""mAP of the clumping source before and after border-channel watershed splitting.

The border channel is derived from ground truth, so this measures the ceiling
of what a perfect border predictor would buy.

    python scripts/watershed_gain.py --images 100 --seed 42
"""
import argparse
import time

from maskfuse.evaluation import kaggle_map
from maskfuse.mask_core import instances_from_label_map
from maskfuse.parallel import image_pool
from maskfuse.postprocess import clean_pipeline
from maskfuse.synth import generate_corpus
from maskfuse.targets import make_unet_targets


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--radius", type=int, default=1, help="border dilation radius")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    with image_pool(args.threads) as pmap:
        corpus = generate_corpus(args.images, args.seed, pmap=pmap)

        def run(c):
            gts = instances_from_label_map(c.gt)
            borders = make_unet_targets(c.gt, args.radius).borders
            raw = instances_from_label_map(c.pred_a)
            return (raw, gts), (clean_pipeline(c.pred_a), gts), (clean_pipeline(c.pred_a, borders=borders), gts)

        triples = pmap(run, corpus)
    for k, label in enumerate(("raw", "cleaned", "cleaned + watershed")):
        print(f"{label:<22}mAP {kaggle_map([t[k] for t in triples])[0]:.4f}")
    print(f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
