#!/usr/bin/env python3

from fisheye_plumb.cli import cli


if __name__ == "__main__":
    cli()
