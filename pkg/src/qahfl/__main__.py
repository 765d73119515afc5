import sys

from qahfl.cli import main

sys.exit(main())
