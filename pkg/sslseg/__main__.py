"""
Run sslseg experiment steps from the command line.
"""
import logging
import os

from . import core, experiments
from .cli import get_arg_parser
from .utils import ConfigError, SSLSegError
from .version import version_str


def _print_eval(rows):
    print(f"{'subject_id':<16}{'class':>6}{'dice':>10}")
    for sid, c, d in rows:
        print(f"{sid:<16}{c:>6}{d:>10.4f}")


def run(args):
    if args.command is None:
        raise ConfigError("no command given, expected one of "
                          "pretrain|finetune|eval|sweep|gen-data")
    cfg = experiments.load_config(args.config, out_dir=args.out, seed=args.seed)
    os.makedirs(cfg.output.dir, exist_ok=True)
    core.set_threads()
    core.deterministic(cfg.pretrain.seed)

    if args.command == "gen-data":
        print(experiments.cmd_gen_data(cfg))
    elif args.command == "pretrain":
        methods = [args.method] if args.method else None
        for method, path in experiments.cmd_pretrain(cfg, methods).items():
            print(f"{method}\t{path}")
    elif args.command == "finetune":
        print(experiments.cmd_finetune(cfg, method=args.method or "none",
                                       n_subjects=args.n_subjects,
                                       checkpoint=args.checkpoint))
    elif args.command == "sweep":
        rows = experiments.cmd_sweep(cfg)
        print(f"{len(rows)} result rows written to {cfg.path('results.csv')}")
    elif args.command == "eval":
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint")
        _print_eval(experiments.cmd_eval(cfg, args.checkpoint))


def main(argv=None):
    """ Run sslseg from command line, returns the process exit code
    """
    args = get_arg_parser().parse_args(argv)

    if args.version:
        print(version_str)
        return 0

    if args.verbose:
        from .io import logger_setup
        log_dir = args.out if args.out is not None else ".sslseg"
        logger, log_file = logger_setup(log_dir)
    else:
        logger = logging.getLogger(__name__)

    try:
        run(args)
    except SSLSegError as err:
        logger.critical(f"{type(err).__name__}: {err}")
        return err.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
