"""Clean and adversarial accuracy of the four methods on the toy world.

Attacks every sample with the pgd-rn50 PGD preset (eps 1/255, 7 steps)
against the zero-shot head, then evaluates zero-shot CLIP, the uniform
view ensemble, TPT and R-TPT on the clean and the attacked images.

    python3 demos/toy_benchmark.py --n-samples 100
"""

import argparse
import tempfile

import torch

from rtpt.attacks import PRESETS, generate_and_cache
from rtpt.harness import Condition, compute_metrics, make_toy_dataset, render_text, run_eval
from rtpt.pipeline import method_preset
from rtpt.toy import make_toy_backend


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n-samples", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--preset", default="pgd-rn50", choices=sorted(PRESETS))
    args = parser.parse_args()
    torch.set_num_threads(1)

    backend = make_toy_backend(args.seed)
    data = make_toy_dataset(seed=args.seed, n_samples=args.n_samples)
    with tempfile.TemporaryDirectory() as cache_root:
        cache = generate_and_cache(data, PRESETS[args.preset], backend, cache_root=cache_root)
        conditions = [Condition.clean(), Condition.from_cache(cache)]
    methods = [method_preset(m) for m in ("zeroshot", "ensemble", "tpt", "rtpt")]
    records = run_eval(data, backend, methods, conditions, seed=args.seed,
                       progress=lambda i, n: print(f"\r{i}/{n}", end="", flush=True))
    print()
    print(render_text(compute_metrics(records)))


if __name__ == "__main__":
    main()
