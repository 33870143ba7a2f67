"""Command-line entry point.

Subcommands: ``gen`` (synthetic corpus), ``match`` (one pair), ``bench``
(corpus MMA report), ``loss-report`` (supervision breakdown), ``selftest``
(invariant suite), ``kernel-bench`` (compiled vs pure-python kernels).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 degenerate
pair (zero coarse matches; outputs are still written).
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .attention import AttentionParams, attention_weights
from .config import AblationFlags, RunConfig
from .confidence import VARIANT_ALIASES
from .evaluate import WARP_MODES, generate_corpus, load_corpus, run_benchmark
from .features import Image, write_pgm
from .losses import (
    FocalConfig,
    confidence_grad,
    confidence_loss,
    focal_grad,
    focal_loss,
    grad_check,
    pair_loss_report,
    subpixel_grad,
    subpixel_loss,
)
from .matching import PipelineWeights, mnn_filter, run_pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4


def _add_config_args(p):
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coarse-channels", type=int, default=256)
    g.add_argument("--fine-channels", type=int, default=128)
    g.add_argument("--gamma", type=float, default=None,
                   help="correlation temperature (default: sqrt(coarse channels))")
    g.add_argument("--lambda", dest="lam", type=float, default=0.1,
                   help="coarse similarity temperature")
    g.add_argument("--theta-c", type=float, default=0.2, help="coarse match threshold")
    g.add_argument("--eta", type=float, default=0.0, help="bias strength exponent (alpha=e^eta)")
    g.add_argument("--beta", type=float, default=1.0, help="confidence-loss weight")
    g.add_argument("--epsilon", type=float, default=1.0, help="subpixel-loss mask radius")
    g.add_argument("--pool", type=int, default=2)
    g.add_argument("--t-blocks", type=int, default=2)
    g.add_argument("--heads", type=int, default=1)
    g.add_argument("--window", type=int, default=8)
    g.add_argument("--conf-variant", default="v",
                   choices=sorted(VARIANT_ALIASES) + sorted(VARIANT_ALIASES.values()))
    g.add_argument("--no-bias", action="store_true", help="disable the confidence-guided bias")
    g.add_argument("--no-rescale", action="store_true", help="disable value rescaling")
    g.add_argument("--no-supervise-confidence", action="store_true",
                   help="drop the confidence loss from the total")


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        seed=args.seed,
        coarse_channels=args.coarse_channels,
        fine_channels=args.fine_channels,
        gamma=args.gamma,
        lam=args.lam,
        theta_c=args.theta_c,
        eta=args.eta,
        beta=args.beta,
        epsilon=args.epsilon,
        pool=args.pool,
        t_blocks=args.t_blocks,
        heads=args.heads,
        window=args.window,
        conf_variant=args.conf_variant,
        flags=AblationFlags(
            bias=not args.no_bias,
            rescale=not args.no_rescale,
            supervise_confidence=not args.no_supervise_confidence,
        ),
    ).validate()


def _load_weights(args, cfg) -> PipelineWeights:
    weights = PipelineWeights.from_config(cfg)
    if getattr(args, "weights", None):
        weights = PipelineWeights(
            attention=AttentionParams.load(args.weights), fusion=weights.fusion
        )
    return weights


def cmd_gen(args) -> int:
    meta = generate_corpus(
        args.out,
        seed=args.seed,
        n_pairs=args.pairs,
        size=args.size,
        warp_magnitude=args.warp_magnitude,
        noise=args.noise,
        warp_mode=args.warp_mode,
    )
    print(f"wrote {args.pairs} pairs to {meta.parent}")
    return EXIT_OK


def _write_match_ppm(path, img1, img2, match_set, max_lines=256):
    """Side-by-side pair with green match segments (binary PPM)."""
    h, w = img1.data.shape
    gray = np.concatenate([img1.data, img2.data], axis=1)
    canvas = np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    n = match_set.n_fine
    step = max(1, n // max_lines)
    for p1, p2 in zip(match_set.fine_p1[::step], match_set.fine_p2[::step]):
        x1, y1 = p1
        x2, y2 = p2[0] + w, p2[1]
        length = int(max(abs(x2 - x1), abs(y2 - y1))) + 1
        ts = np.linspace(0.0, 1.0, 2 * length + 1)
        xs = np.clip((x1 + ts * (x2 - x1)).astype(np.int64), 0, 2 * w - 1)
        ys = np.clip((y1 + ts * (y2 - y1)).astype(np.int64), 0, h - 1)
        canvas[ys, xs] = (40, 220, 40)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (canvas.shape[1], canvas.shape[0]))
        f.write(canvas.tobytes())


def cmd_match(args) -> int:
    cfg = _config_from_args(args)
    img1 = Image.load(args.img1)
    img2 = Image.load(args.img2)
    weights = _load_weights(args, cfg)
    state = run_pipeline(img1, img2, cfg, weights)
    ms = state.match_set()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ms.to_jsonl(out_dir / "matches.jsonl", include_coarse=args.include_coarse)
    if args.dump_confidence:
        hc, wc = state.pyr1.coarse_grid
        write_pgm(out_dir / "confidence1.pgm", state.conf1.reshape(hc, wc))
        write_pgm(out_dir / "confidence2.pgm", state.conf2.reshape(hc, wc))
    if args.viz:
        _write_match_ppm(out_dir / "matches.ppm", img1, img2, ms)
    mode = "baseline (bias off, rescale off)" if not (cfg.flags.bias or cfg.flags.rescale) \
        else f"flags {cfg.flags.tag()}"
    print(f"{ms.n_coarse} coarse / {ms.n_fine} fine matches [{mode}] -> {out_dir}")
    if ms.n_coarse == 0:
        print("degenerate pair: no coarse matches", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    out = args.out
    if out is None:
        out = str(Path(args.corpus) / f"report-{cfg.flags.tag()}.json")
    report = run_benchmark(args.corpus, cfg, out_path=out, weights=_load_weights(args, cfg))
    mean = ", ".join(
        f"@{t:g}px={a:.4f}" for t, a in zip(report["thresholds"], report["mean_accuracy"])
    )
    print(f"mean MMA over {len(report['pairs'])} pairs: {mean}")
    print(f"report -> {out}")
    return EXIT_OK


def cmd_loss_report(args) -> int:
    cfg = _config_from_args(args)
    pairs = load_corpus(args.corpus)
    wanted = args.pair or pairs[0].id
    match = [p for p in pairs if p.id == wanted]
    if not match:
        raise ValueError(f"pair {wanted!r} not found in corpus")
    pair = match[0]
    report = pair_loss_report(
        pair.image1, pair.image2, pair.h, cfg, weights=_load_weights(args, cfg)
    )
    report["pair"] = pair.id
    report["config"] = cfg.to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"loss report -> {args.out}")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def _check_bias_equivalence(rng, alpha):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        c = int(rng.integers(2, 17))
        q = rng.standard_normal((n, c))
        k = rng.standard_normal((n, c))
        w1 = rng.random((n, 1))
        scale = 1.0 / math.sqrt(c)
        modulated = scale * ((q * (1.0 + alpha * w1)) @ k.T)
        additive = scale * (q @ k.T + alpha * ((q * w1) @ k.T))
        worst = max(worst, float(np.abs(modulated - additive).max()))
    return worst, 1e-10


def _check_temperature_limit(rng, alpha):
    tau = max(1e3, 1.0 + alpha)
    worst = 0.0
    for _ in range(20):
        row = rng.standard_normal(12)
        top = row.argmax()
        row[top] = row.max() + 0.5  # enforce the gap
        a = attention_weights((tau * row)[None, :])[0]
        worst = max(worst, float(1.0 - a[top]))
    for k in (2, 3):
        row = rng.standard_normal(10)
        top = row.max() + 1.0
        row[:k] = top
        a = attention_weights((tau * row)[None, :])[0]
        worst = max(worst, float(np.abs(a[:k] - 1.0 / k).max()))
    return worst, 1e-6


def _oracle_dual_softmax_mnn(s, theta):
    n, m = len(s), len(s[0])
    p = [[0.0] * m for _ in range(n)]
    for i in range(n):
        rden = sum(math.exp(v) for v in s[i])
        for j in range(m):
            cden = sum(math.exp(s[a][j]) for a in range(n))
            p[i][j] = (math.exp(s[i][j]) / rden) * (math.exp(s[i][j]) / cden)
    pairs = set()
    for i in range(n):
        best = max(p[i])
        if p[i].count(best) != 1 or best < theta:
            continue
        j = p[i].index(best)
        col = [p[a][j] for a in range(n)]
        if col.count(max(col)) == 1 and max(col) == p[i][j]:
            pairs.add((i, j))
    return pairs


def _check_mnn_oracle(rng, _alpha):
    from .matching import dual_softmax

    mismatches = 0
    for h1 in range(1, 5):
        for w1 in range(1, 5):
            for h2 in range(1, 5):
                for w2 in range(1, 5):
                    n, m = h1 * w1, h2 * w2
                    s = rng.standard_normal((n, m)) * 2.0
                    for theta in (0.0, 0.1):
                        want = _oracle_dual_softmax_mnn(s.tolist(), theta)
                        pairs, _ = mnn_filter(dual_softmax(s), theta)
                        got = {(int(i), int(j)) for i, j in pairs}
                        if got != want:
                            mismatches += 1
    return float(mismatches), 0.5


def _check_gradients(rng, _alpha):
    worst = 0.0
    fc = FocalConfig()
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, size=(4, 5))
        gt = (rng.random((4, 5)) < 0.3).astype(np.float64)
        worst = max(
            worst,
            grad_check(
                lambda x, gt=gt: focal_loss(x, gt, fc),
                lambda x, gt=gt: focal_grad(x, gt, fc),
                p,
            ),
        )
        pred = rng.standard_normal((6, 2))
        tgt = rng.standard_normal((6, 2))
        worst = max(
            worst,
            grad_check(
                lambda x, tgt=tgt: subpixel_loss(x, tgt, 1.0)[0],
                lambda x, tgt=tgt: subpixel_grad(x, tgt, 1.0),
                pred,
            ),
        )
        w = rng.uniform(0.05, 0.95, size=8)
        t1 = (rng.random(8) < 0.5).astype(np.float64)
        w_other = rng.uniform(0.05, 0.95, size=8)
        t2 = (rng.random(8) < 0.5).astype(np.float64)
        worst = max(
            worst,
            grad_check(
                lambda x: confidence_loss(x, w_other, t1, t2),
                lambda x: confidence_grad(x, t1),
                w,
            ),
        )
    return worst, 1e-4


_SELFTEST_CHECKS = (
    ("bias-equivalence", _check_bias_equivalence),
    ("temperature-limit", _check_temperature_limit),
    ("dual-softmax-mnn-oracle", _check_mnn_oracle),
    ("gradient-checks", _check_gradients),
)


def cmd_selftest(args) -> int:
    alpha = math.exp(args.eta)
    failed = False
    for name, fn in _SELFTEST_CHECKS:
        rng = np.random.default_rng(args.seed)
        err, tol = fn(rng, alpha)
        ok = err <= tol
        if args.inject_fault and name == "bias-equivalence":
            ok, err = False, 1.0
        failed |= not ok
        print(f"{name:<26} {'PASS' if ok else 'FAIL'}  max_err={err:.3e}  tol={tol:g}")
    return EXIT_OK if not failed else 1


# ---------------------------------------------------------------------------
# kernel benchmark


def _time_call(fn, *args, repeat):
    best = math.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def cmd_kernel_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    n = args.n
    ww = args.window * args.window
    cases = {
        "dual_softmax": (rng.standard_normal((n, n)),),
        "mutual_pairs": (np.abs(rng.standard_normal((n, n))), 0.1),
        "batched_dual_softmax": (rng.standard_normal((args.batch, ww, ww)),),
        "batched_mutual_pairs": (np.abs(rng.standard_normal((args.batch, ww, ww))), 0.0),
        "softmax_expectation": (
            rng.standard_normal((args.batch * ww, 9)),
            rng.uniform(-1, 1, size=(args.batch * ww, 9, 2)),
            np.ones((args.batch * ww, 9), dtype=bool),
        ),
    }
    names = kernels.available_backends()
    rows = []
    print(f"backends: {', '.join(names)} (active: {kernels.active_backend()})")
    for kernel_name, inputs in cases.items():
        timings = {}
        outputs = {}
        for backend in names:
            fn = getattr(kernels.get_backend(backend), kernel_name)
            timings[backend], outputs[backend] = _time_call(fn, *inputs, repeat=args.repeat)
        row = {"kernel": kernel_name, "timings_s": timings}
        if len(names) == 2:
            a, b = outputs["python"], outputs["native"]
            if isinstance(a, tuple):
                agree = all(np.array_equal(x, y) for x, y in zip(a, b))
                row["max_abs_diff"] = 0.0 if agree else math.inf
            else:
                row["max_abs_diff"] = float(np.abs(a - b).max())
            if row["max_abs_diff"] > 1e-12:
                raise ValueError(f"{kernel_name}: backends disagree by {row['max_abs_diff']:.3e}")
            row["speedup_native"] = timings["python"] / timings["native"]
            print(
                f"{kernel_name:<22} python={timings['python'] * 1e3:8.2f}ms  "
                f"native={timings['native'] * 1e3:8.2f}ms  "
                f"speedup={row['speedup_native']:5.2f}x  "
                f"max|diff|={row['max_abs_diff']:.2e}"
            )
        else:
            only = names[0]
            print(f"{kernel_name:<22} {only}={timings[only] * 1e3:8.2f}ms")
        rows.append(row)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
        print(f"kernel benchmark -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confmatch",
        description="Confidence-guided attention matching on synthetic homography pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--warp-magnitude", type=float, default=8.0)
    p.add_argument("--warp-mode", choices=WARP_MODES, default="projective")
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("match", help="match one image pair")
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--out", default="matches", help="output directory")
    p.add_argument("--weights", default=None, help="attention weights JSON")
    p.add_argument("--include-coarse", action="store_true")
    p.add_argument("--dump-confidence", action="store_true",
                   help="write the two confidence maps as PGM")
    p.add_argument("--viz", action="store_true", help="write a side-by-side match PPM")
    _add_config_args(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", help="run the MMA benchmark over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None, help="report path (default: <corpus>/report-<flags>.json)")
    p.add_argument("--weights", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("loss-report", help="supervision losses for one corpus pair")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pair", default=None, help="pair id (default: first)")
    p.add_argument("--weights", default=None)
    p.add_argument("--out", default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_loss_report)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("kernel-bench", help="compare the kernel backends")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1024, help="side of the coarse probability matrix")
    p.add_argument("--batch", type=int, default=128, help="number of fine patches")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_kernel_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
