import sys

from fbsdej.cli import main

if __name__ == '__main__':
    # python run.py <train|markovian|rate|verify|errors> [flags]
    sys.exit(main())
