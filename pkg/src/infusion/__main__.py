import sys

from infusion.cli import main

sys.exit(main())
