from ssmlab.cli import main

main()
