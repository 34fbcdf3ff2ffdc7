import sys

from batchrl.cli import main

sys.exit(main())
