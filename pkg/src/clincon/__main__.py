import sys

from clincon.cli import main

sys.exit(main())
