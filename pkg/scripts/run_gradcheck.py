"""Finite-difference gradient check of every layer kind and a reduced iCNN.

    python scripts/run_gradcheck.py
"""
import sys

from faceparse.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", *sys.argv[1:]]))
