"""Download SNAP datasets into the vgraph data directory.

    python scripts/fetch_datasets.py facebook [youtube amazon dblp]

The target is $VGRAPH_DATA_DIR, or ~/.cache/vgraph when unset.
"""

import argparse

from vgraph import datasets


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="+", choices=sorted(datasets.SOURCES))
    p.add_argument("--root", help="override the data directory")
    args = p.parse_args()
    for name in args.names:
        print(f"{name} -> {datasets.fetch(name, args.root)}")


if __name__ == "__main__":
    main()
