import sys

from hcpl.cli import main

sys.exit(main())
