from graph_metamers.cli import main
import sys
sys.exit(main())
