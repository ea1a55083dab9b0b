import sys

from mil_action.main import main

sys.exit(main())
