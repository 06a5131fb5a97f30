from gpecm.cli import main

main()
