import sys

from v2x_stack.main import run

if __name__ == "__main__":
    sys.exit(run())
