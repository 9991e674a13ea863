"""Entry point for `python -m src`: the fsa-yolo command line."""

from src.cli import main

if __name__ == "__main__":
    main()
