import sys

from cof.cli import main

sys.exit(main())
