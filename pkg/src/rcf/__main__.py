import sys

from rcf.cli import main

sys.exit(main())
