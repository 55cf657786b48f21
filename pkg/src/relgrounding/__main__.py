import sys

from relgrounding.cli import main

sys.exit(main())
