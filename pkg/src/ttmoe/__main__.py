import sys

from ttmoe.cli import main

sys.exit(main())
