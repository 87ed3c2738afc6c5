import sys

from envdpo import envdpo

if __name__ == "__main__":
    sys.exit(envdpo.main())
