"""Allow `python -m focusrl` as an alias for the console script."""

import sys

from focusrl.cli import main

if __name__ == "__main__":
    sys.exit(main())
