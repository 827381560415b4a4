"""
Command line arguments of sslseg.
"""
import argparse

COMMANDS = ("pretrain", "finetune", "eval", "sweep", "gen-data")


def get_arg_parser():
    """ Parses command line arguments for the sslseg main function

    Note: this function has to be in a separate file to allow autodoc to work for CLI.
    """

    parser = argparse.ArgumentParser(description="sslseg Command Line Parameters")

    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="experiment step to run")

    # misc settings
    parser.add_argument("--version", action="store_true",
                        help="show sslseg version info")
    parser.add_argument(
        "--verbose", action="store_true",
        help="show information about running and settings and save to log")

    # experiment settings
    experiment_args = parser.add_argument_group("Experiment Arguments")
    experiment_args.add_argument("--config", default=None, type=str,
                                 help="experiment config file (INI sections), defaults if not set")
    experiment_args.add_argument("--out", default=None, type=str,
                                 help="output folder, overrides output.dir")
    experiment_args.add_argument(
        "--seed", default=None, type=int,
        help="overrides the pretraining and phantom generation seeds")

    # command specific settings
    command_args = parser.add_argument_group("Command Arguments")
    command_args.add_argument(
        "--method", default=None, type=str,
        help="pretraining method (regression, contrastive, none); pretrain runs all "
        "configured methods if not set, finetune uses none")
    command_args.add_argument(
        "--checkpoint", default=None, type=str,
        help="checkpoint to finetune (finetune) or to evaluate (eval, required)")
    command_args.add_argument(
        "--n-subjects", dest="n_subjects", default=None, type=int,
        help="finetune on this many training subjects instead of the full train split")

    return parser
