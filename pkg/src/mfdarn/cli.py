"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 ask/tell protocol violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic
import yaml

from . import driver
from .hmc import ChainDiverged
from .numerics import NumericalError, make_rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROTOCOL = 0, 2, 3, 4

log = logging.getLogger("mfdarn")


def _config(args, stored: driver.RunConfig | None = None) -> driver.RunConfig:
    if args.config is not None:
        return driver.load_config(args.config, seed=args.seed)
    if stored is None:
        raise ValueError("--config is required")
    if args.seed is not None:
        return stored.model_copy(update={"seed": args.seed})
    return stored


def _load_or_new(args):
    path = Path(args.state) if args.state else None
    if path is not None and path.exists():
        state, stored = driver.load_state(path)
        return state, _config(args, stored)
    cfg = _config(args)
    return driver.new_state(cfg), cfg


def cmd_run(args) -> int:
    state, cfg = _load_or_new(args)
    state = driver.run(cfg, state, state_path=args.state)
    if args.out:
        driver.write_history_csv(state, args.out)
    print(f"rounds {state.round_index - 1}, cost {state.cumulative_cost:g}, "
          f"best {state.best_value:.6g}")
    return EXIT_OK


def cmd_suggest(args) -> int:
    if not args.state:
        raise ValueError("suggest needs --state")
    state, cfg = _load_or_new(args)
    batch = driver.ask(state, cfg)
    driver.save_state(state, args.state, cfg)
    if args.out:
        driver.write_batch_csv(batch, args.out)
    else:
        for x, m in batch.pairs:
            print(m, *x.tolist())
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.state or not Path(args.state).exists():
        raise ValueError("report needs an existing --state")
    state, cfg = _load_or_new(args)
    driver.tell(state, cfg, driver.read_results_csv(args.results))
    driver.save_state(state, args.state, cfg)
    if args.out:
        driver.write_history_csv(state, args.out)
    print(f"observations {len(state.data)}, cost {state.cumulative_cost:g}, "
          f"best {state.best_value:.6g}")
    return EXIT_OK


def cmd_fit_surrogate(args) -> int:
    cfg = _config(args)
    fn = cfg.function
    if fn is None:
        raise ValueError("fit-surrogate needs a benchmark")
    sizes = cfg.train_sizes or [cfg.initial_per_fidelity] * cfg.M
    report = driver.evaluate_surrogate(cfg, fn, sizes, cfg.test_count, make_rng(cfg.seed))
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfdarn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--state", help="state file (read if present, then written)")
        p.add_argument("--out", help="output file")
        p.set_defaults(func=func)
        return p

    add("run", cmd_run, "run the full loop on a named benchmark; --out writes history CSV")
    add("suggest", cmd_suggest, "ask for the next batch; --out writes it as CSV")
    p = add("report", cmd_report, "tell results for the pending batch; --out writes history CSV")
    p.add_argument("results", help="CSV with header fidelity,x1,...,xd,y")
    add("fit-surrogate", cmd_fit_surrogate, "fit on synthetic data and print held-out metrics")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except driver.ProtocolError as exc:
        log.error("%s", exc)
        return EXIT_PROTOCOL
    except (NumericalError, ChainDiverged) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (pydantic.ValidationError, yaml.YAMLError, driver.StateFileError,
            OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
