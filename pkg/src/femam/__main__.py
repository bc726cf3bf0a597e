import sys

from femam.cli import main

sys.exit(main())
