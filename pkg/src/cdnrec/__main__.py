import sys

from cdnrec.cli import main

sys.exit(main())
