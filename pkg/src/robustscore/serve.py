"""Serve a saved MLP over the JSON-lines model protocol.

    python -m robustscore.serve model.pdmlp
"""

import sys

from .models import load_mlp, serve


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m robustscore.serve MODEL_FILE", file=sys.stderr)
        return 1
    serve(load_mlp(argv[0]), sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
