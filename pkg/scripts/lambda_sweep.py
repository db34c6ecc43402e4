"""Rate-distortion sweep over lambda on the synthetic set.

Every lambda trains from the same initialization on the same batches, so
lambda is the only thing that differs between runs. Prints eval-mode bpp and
MSE per lambda as JSON lines.

    python scripts/lambda_sweep.py --steps 500
    python scripts/lambda_sweep.py --lambdas 0.00067 0.005 --comp-kl 0
"""

import argparse
import json
import time

from satcodec.synthetic import synthetic_dataset
from satcodec.training import LAMBDAS, TrainConfig, evaluate_stage1, stage1_train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lambdas", type=float, nargs="+", default=list(LAMBDAS))
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--comp-kl", type=float, default=1.0, help="weight of the compensation-latent KL term")
    p.add_argument("--num-images", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    images, _ = synthetic_dataset(args.num_images, args.size, seed=args.seed)
    for lam in args.lambdas:
        start = time.perf_counter()
        cfg = TrainConfig(lam=lam, steps=args.steps, lr=args.lr, seed=args.seed, comp_kl=args.comp_kl)
        codec, history = stage1_train(images, cfg)
        ev = evaluate_stage1(codec, images)
        tail = history[-min(100, len(history)):] or [{}]
        print(json.dumps({
            "lambda": lam,
            "bpp": ev.bpp,
            "mse": ev.mse,
            "psnr": ev.psnr,
            "train_comp_kl_bpp": sum(r.get("comp_kl_bpp", 0.0) for r in tail) / len(tail),
            "seconds": round(time.perf_counter() - start, 1),
        }), flush=True)


if __name__ == "__main__":
    main()
