import sys

from irdseg.cli import main

sys.exit(main())
