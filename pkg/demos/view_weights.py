"""Where the reliability weights go for one attacked toy image.

Runs R-TPT on a PGD-attacked sample, prints the views with the largest and
smallest weights next to their predictions, and saves a bar plot of all
weights.  View 0 is the attacked image itself.

    python3 demos/view_weights.py --sample 5 --output weights.png
"""

import argparse

import torch

from rtpt.augment import sample_seed
from rtpt.attacks import PRESETS, attack_head, run_attack
from rtpt.harness import make_toy_dataset, plot_view_weights
from rtpt.model import classify, encode_image
from rtpt.pipeline import initial_state, make_views, method_preset, run_method
from rtpt.toy import make_toy_backend


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sample", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output", default="view_weights.png")
    args = parser.parse_args()
    torch.set_num_threads(1)

    backend = make_toy_backend(args.seed)
    data = make_toy_dataset(seed=args.seed, n_samples=args.sample + 1)
    sid, x, y = data.samples[args.sample]
    spec = PRESETS["pgd-rn50"]
    adv = run_attack(backend, attack_head(backend, data.class_names, spec), x, y, spec, sample_id=sid).image

    cfg = method_preset("rtpt")
    views = make_views(adv, cfg, seed=sample_seed(args.seed, sid), sample_id=sid)
    out = run_method(backend, data.class_names, adv, cfg, views=views)
    with torch.no_grad():
        before = classify(encode_image(backend, views.views), initial_state(backend, data.class_names, cfg).head)

    print(f"label {y}, zero-shot on attacked image {int(before[0].argmax())}, R-TPT {out.predicted_class}")
    order = torch.argsort(out.weights, descending=True)
    for tag, idx in (("highest", order[:5]), ("lowest", order[-5:])):
        print(f"{tag} weights:")
        for i in idx.tolist():
            print(f"  view {i:2d}  w {float(out.weights[i]):.3e}  zero-shot pred {int(before[i].argmax())}")
    print(f"view 0 weight {float(out.weights[0]):.3e} (uniform would be {1 / len(out.weights):.3e})")
    print("saved", plot_view_weights(out.weights, args.output, title=f"toy sample {sid}"))


if __name__ == "__main__":
    main()
