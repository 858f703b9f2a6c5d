"""Main entry point for PestVL-Net."""

import sys

from pestvl_net.main import main

if __name__ == "__main__":
    sys.exit(main())
