import sys

from uvc.cli import main

sys.exit(main())
