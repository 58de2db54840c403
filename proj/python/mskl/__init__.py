"""Few-shot meta-learning over multivariate sequences.

Thin Python layer over the C++ core. ``main`` runs the command line.
"""

import sys

from ._core import (
    ValidationError,
    embed,
    gradcheck,
    head_posterior,
    init_head,
    micro_accuracy,
    nts,
    plan_round_robin,
    protonet_posterior,
    qa_trust,
    roc_auc,
    run_cli,
    synth,
    trust_density,
    tukey_filter,
)

__all__ = [
    "ValidationError",
    "embed",
    "gradcheck",
    "head_posterior",
    "init_head",
    "main",
    "micro_accuracy",
    "nts",
    "plan_round_robin",
    "protonet_posterior",
    "qa_trust",
    "roc_auc",
    "run_cli",
    "synth",
    "trust_density",
    "tukey_filter",
]


def main(argv=None):
    code, out, err = run_cli(list(sys.argv[1:] if argv is None else argv))
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
