import sys

from elto.main import main

sys.exit(main())
